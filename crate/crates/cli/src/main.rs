//! `splitvae`: generate data, train, evaluate and check gradients.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use splitvae::evaluation::{LatentBlock, Protocol};
use splitvae::training::GradCheckSetup;

use crate::commands::EvalOverrides;
use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "splitvae", version, about = "Sequential content/style VAE experiments on spike-count data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset described by a config into a bundle directory.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Bundle directory; defaults to `<output_dir>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train a model and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Bundle directory; overrides the config's data source.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory; defaults to `<output_dir>/train`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Evaluate a checkpoint and write a metrics report.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of the full objective.
    Gradcheck {
        /// Config whose `[gradcheck]` section sets the toy problem.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
        /// Scale the first parameter's analytic gradient by `1 + x`.
        #[arg(long, hide = true)]
        corrupt: Option<f64>,
    },
    /// Write per-step latents of one partition to a spike data file.
    DumpLatents {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        partition: String,
        #[arg(long)]
        markov_order: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file. With --seeds, `{seed}` in the path is replaced.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Bundle directory. With --seeds, `{seed}` in the path is replaced.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Config supplying the data source and `[eval]` defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// reconstruction, scene or movie.
    #[arg(long)]
    protocol: Option<Protocol>,
    /// content, style or both.
    #[arg(long)]
    latents: Option<LatentBlock>,
    /// Sliding-window inference order; full-trial unroll when absent.
    #[arg(long)]
    markov_order: Option<usize>,
    /// Movie decoding tolerance in seconds.
    #[arg(long)]
    window: Option<f64>,
    /// Movie frames per second, for converting --window.
    #[arg(long, default_value_t = 30.0)]
    frame_rate: f64,
    /// Comma-separated seeds; reports mean and standard error.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Metrics report path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    overwrite: bool,
}

fn load_optional(path: Option<&PathBuf>) -> Result<Option<ExperimentConfig>, CliError> {
    path.map(|p| ExperimentConfig::load(p)).transpose()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { config, out, overwrite } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("data"));
            let bundle = commands::gen(&cfg, &out, overwrite)?;
            println!("dataset {} -> {}", bundle.manifest.sha256(), out.display());
        }
        Command::Train { config, data, run_dir, overwrite } => {
            let cfg = ExperimentConfig::load(&config)?;
            let bundle = commands::load_data(Some(&cfg), data.as_deref())?;
            let run_dir = run_dir.unwrap_or_else(|| cfg.output_dir.join("train"));
            let hashes = commands::train(&cfg, &bundle, &run_dir, overwrite)?;
            println!("checkpoint {} -> {}", hashes.checkpoint_sha256, run_dir.join("model.ckpt").display());
        }
        Command::Eval(a) => {
            let cfg = load_optional(a.config.as_ref())?;
            let overrides = EvalOverrides {
                protocol: a.protocol,
                latents: a.latents,
                markov_order: a.markov_order,
                window_seconds: a.window,
                frame_rate: a.frame_rate,
            };
            let spec = overrides.apply(cfg.as_ref().map(|c| c.eval.clone()).unwrap_or_default())?;
            let output = commands::eval(&a.checkpoint, a.data.as_deref(), cfg.as_ref(), &spec, &a.seeds)?;
            let out = a
                .out
                .unwrap_or_else(|| a.checkpoint.parent().unwrap_or(std::path::Path::new(".")).join("metrics.json"));
            commands::write_json(&out, &output, a.overwrite)?;
            for (i, r) in output.reports.iter().enumerate() {
                let seed = a.seeds.get(i).map_or(String::new(), |s| format!("seed {s}: "));
                println!("{seed}{:?} {:?}: {:.6}", spec.protocol, spec.latents, r.record.headline());
            }
            if let Some(agg) = &output.aggregate {
                println!("mean {:.6} ± {:.6} (stderr, n={})", agg.mean, agg.stderr, agg.values.len());
            }
        }
        Command::Gradcheck { config, out, overwrite, corrupt } => {
            let cfg = load_optional(config.as_ref())?;
            let setup = cfg.and_then(|c| c.gradcheck).unwrap_or_else(GradCheckSetup::default);
            let report = commands::gradcheck(&setup, corrupt)?;
            for t in &report.terms {
                println!("term  {:<14} {:.3e}", t.name, t.max_rel_error);
            }
            for p in &report.params {
                println!("param {:<28} {:.3e}", p.name, p.max_rel_error);
            }
            let verdict = if report.passed() { "PASS" } else { "FAIL" };
            println!("{verdict}: max relative error {:.3e} (tolerance {:.0e})", report.max_rel_error, report.tolerance);
            if let Some(out) = out {
                commands::write_json(&out, &report, overwrite)?;
            }
            if !report.passed() {
                return Err(CliError::Numerical("gradient check failed".into()));
            }
        }
        Command::DumpLatents { checkpoint, data, config, partition, markov_order, out, overwrite } => {
            let cfg = load_optional(config.as_ref())?;
            let bundle = commands::load_data(cfg.as_ref(), data.as_deref())?;
            let header = commands::dump_latents(&checkpoint, &bundle, &partition, markov_order, &out, overwrite)?;
            println!(
                "{} latents (content {}, style {}, truth {}) -> {}",
                header.partition,
                header.content_dim,
                header.style_dim,
                header.truth_dim,
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
