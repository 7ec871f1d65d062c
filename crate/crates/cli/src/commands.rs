//! Implementations of the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use splitvae::evaluation::{self, checkpoint_sha256, EvalSpec, LatentBlock, MetricsReport, Protocol};
use splitvae::format;
use splitvae::model::Model;
use splitvae::objectives::LossBreakdown;
use splitvae::synthdata::DatasetBundle;
use splitvae::training::{self, gradcheck_objective, GradCheckSetup, ObjectiveGradCheck};

use crate::config::ExperimentConfig;
use crate::error::CliError;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Creates `dir`, refusing a non-empty one unless `overwrite` is set.
pub fn prepare_dir(dir: &Path, overwrite: bool) -> Result<(), CliError> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() {
            if !overwrite {
                return Err(CliError::Usage(format!("{} exists and is not empty; pass --overwrite", dir.display())));
            }
            fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn refuse_existing(path: &Path, overwrite: bool) -> Result<(), CliError> {
    if path.exists() && !overwrite {
        return Err(CliError::Usage(format!("{} exists; pass --overwrite", path.display())));
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model, CliError> {
    let mut f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    Model::load(&mut f).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Writes the configured dataset bundle to `out`.
pub fn gen(cfg: &ExperimentConfig, out: &Path, overwrite: bool) -> Result<DatasetBundle, CliError> {
    let manifest = cfg.dataset.as_ref().ok_or_else(|| CliError::Usage("config has no [dataset] section".into()))?;
    let bundle = manifest.regenerate()?;
    prepare_dir(out, overwrite)?;
    format::write_bundle(out, &bundle)?;
    info!(
        "wrote {} train, {} validation, {} test trials to {}",
        bundle.train.len(),
        bundle.validation.len(),
        bundle.test.len(),
        out.display()
    );
    Ok(bundle)
}

/// Reads `data`, or the config's data path, or regenerates the config's dataset.
pub fn load_data(cfg: Option<&ExperimentConfig>, data: Option<&Path>) -> Result<DatasetBundle, CliError> {
    if let Some(path) = data.or(cfg.and_then(|c| c.data.as_deref())) {
        return Ok(format::read_bundle(path)?);
    }
    match cfg.and_then(|c| c.dataset.as_ref()) {
        Some(m) => Ok(m.regenerate()?),
        None => Err(CliError::Usage("no data: pass --data or give data/dataset in the config".into())),
    }
}

#[derive(Serialize)]
struct LogLine {
    iteration: usize,
    #[serde(flatten)]
    loss: LossBreakdown,
}

/// Hashes identifying a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHashes {
    pub config_sha256: String,
    pub dataset_sha256: String,
    pub checkpoint_sha256: String,
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("iter_{iteration:06}.ckpt")
}

/// Trains on `bundle.train` and fills `run_dir` with the config echo,
/// hashes, loss log and checkpoints.
pub fn train(
    cfg: &ExperimentConfig,
    bundle: &DatasetBundle,
    run_dir: &Path,
    overwrite: bool,
) -> Result<RunHashes, CliError> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    let n = bundle.n_neurons();
    if n != cfg.model.n_neurons {
        return Err(CliError::Data(format!("data has {n} neurons, model.n_neurons is {}", cfg.model.n_neurons)));
    }
    prepare_dir(run_dir, overwrite)?;
    let echo = cfg.to_toml();
    write(&run_dir.join("config.toml"), &echo)?;
    write(&run_dir.join("manifest.json"), bundle.manifest.to_json())?;
    let ckpt_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| io_err(&ckpt_dir, e))?;

    let outcome = training::train(cfg.model.clone(), cfg.train.clone(), &bundle.train, |it, model| {
        let path = ckpt_dir.join(checkpoint_name(it));
        fs::write(&path, model.to_bytes()).map_err(|e| format!("{}: {e}", path.display()))
    })?;
    if cfg.train.iterations == 0 {
        write(&ckpt_dir.join(checkpoint_name(0)), outcome.model.to_bytes())?;
    }
    write(&run_dir.join("model.ckpt"), outcome.model.to_bytes())?;
    let mut log = String::new();
    for r in &outcome.log {
        log.push_str(
            &serde_json::to_string(&LogLine { iteration: r.iteration, loss: r.loss }).expect("record serializes"),
        );
        log.push('\n');
    }
    write(&run_dir.join("loss_log.jsonl"), log)?;
    let hashes = RunHashes {
        config_sha256: hex::encode(Sha256::digest(echo.as_bytes())),
        dataset_sha256: bundle.manifest.sha256(),
        checkpoint_sha256: checkpoint_sha256(&outcome.model),
    };
    write(&run_dir.join("hashes.json"), serde_json::to_string_pretty(&hashes).expect("hashes serialize") + "\n")?;
    info!("wrote {}", run_dir.display());
    Ok(hashes)
}

/// Flag overrides applied on top of the config's evaluation spec.
#[derive(Clone, Debug, Default)]
pub struct EvalOverrides {
    pub protocol: Option<Protocol>,
    pub latents: Option<LatentBlock>,
    pub markov_order: Option<usize>,
    /// Movie tolerance in seconds.
    pub window_seconds: Option<f64>,
    pub frame_rate: f64,
}

impl EvalOverrides {
    pub fn apply(&self, mut spec: EvalSpec) -> Result<EvalSpec, CliError> {
        if let Some(p) = self.protocol {
            spec.protocol = p;
        }
        if let Some(l) = self.latents {
            spec.latents = l;
        }
        if let Some(n) = self.markov_order {
            spec.markov_order = Some(n);
        }
        if let Some(w) = self.window_seconds {
            if !(w >= 0.0 && w.is_finite() && self.frame_rate > 0.0) {
                return Err(CliError::Usage(format!(
                    "--window must be non-negative and --frame-rate positive, got {w} and {}",
                    self.frame_rate
                )));
            }
            spec.window_frames = (w * self.frame_rate).round() as u32;
        }
        Ok(spec)
    }
}

/// Mean and standard error of the headline metric over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
}

impl Aggregate {
    pub fn new(seeds: Vec<u64>, values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stderr = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
        } else {
            0.0
        };
        Self { seeds, values, mean, stderr }
    }
}

/// Output of `eval`: one report per seed plus the aggregate when seeds
/// were given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub reports: Vec<MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<Aggregate>,
}

pub fn substitute_seed(path: &Path, seed: u64) -> PathBuf {
    PathBuf::from(path.to_string_lossy().replace("{seed}", &seed.to_string()))
}

pub fn eval_one(
    checkpoint: &Path,
    data: Option<&Path>,
    cfg: Option<&ExperimentConfig>,
    spec: &EvalSpec,
) -> Result<MetricsReport, CliError> {
    let model = load_checkpoint(checkpoint)?;
    let bundle = load_data(cfg, data)?;
    if bundle.n_neurons() != model.config().n_neurons {
        return Err(CliError::Data(format!(
            "data has {} neurons, checkpoint expects {}",
            bundle.n_neurons(),
            model.config().n_neurons
        )));
    }
    let record = evaluation::evaluate(&model, &bundle, spec)?;
    Ok(MetricsReport {
        dataset_sha256: bundle.manifest.sha256(),
        checkpoint_sha256: checkpoint_sha256(&model),
        spec: spec.clone(),
        record,
        config: cfg.map_or(serde_json::Value::Null, |c| serde_json::to_value(c).expect("config serializes")),
    })
}

/// Evaluates one checkpoint, or one per seed with `{seed}` substituted
/// into the checkpoint and data paths.
pub fn eval(
    checkpoint: &Path,
    data: Option<&Path>,
    cfg: Option<&ExperimentConfig>,
    spec: &EvalSpec,
    seeds: &[u64],
) -> Result<EvalOutput, CliError> {
    if seeds.is_empty() {
        return Ok(EvalOutput { reports: vec![eval_one(checkpoint, data, cfg, spec)?], aggregate: None });
    }
    let mut reports = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let ckpt = substitute_seed(checkpoint, s);
        let data = data.map(|d| substitute_seed(d, s));
        info!("seed {s}: {}", ckpt.display());
        reports.push(eval_one(&ckpt, data.as_deref(), cfg, spec)?);
    }
    let values = reports.iter().map(|r| r.record.headline()).collect();
    Ok(EvalOutput { reports, aggregate: Some(Aggregate::new(seeds.to_vec(), values)) })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T, overwrite: bool) -> Result<(), CliError> {
    refuse_existing(path, overwrite)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    write(path, serde_json::to_string_pretty(value).expect("value serializes") + "\n")
}

pub fn gradcheck(setup: &GradCheckSetup, corrupt: Option<f64>) -> Result<ObjectiveGradCheck, CliError> {
    Ok(gradcheck_objective(setup, corrupt)?)
}

pub fn dump_latents(
    checkpoint: &Path,
    bundle: &DatasetBundle,
    partition: &str,
    order: Option<usize>,
    out: &Path,
    overwrite: bool,
) -> Result<evaluation::DumpHeader, CliError> {
    refuse_existing(out, overwrite)?;
    let model = load_checkpoint(checkpoint)?;
    if bundle.partition(partition).is_none() {
        return Err(CliError::Usage(format!("unknown partition {partition:?} (train, validation or test)")));
    }
    Ok(evaluation::dump_latents(&model, bundle, partition, order, out)?)
}
