use super::*;
use crate::model::CellKind;
use crate::model::PriorKind;
use crate::synthdata::{gen_lorenz, LorenzSpec};
use rand::Rng;
use std::collections::BTreeMap;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn toy_trials(n_trials: usize, len: usize, n: usize, seed: u64) -> Vec<SpikeSequence> {
    let mut r = rng(seed);
    (0..n_trials)
        .map(|k| SpikeSequence {
            n_neurons: n,
            counts: (0..len * n).map(|_| r.random_range(0..3)).collect(),
            label: Some(k as u32),
            latents: Vec::new(),
            latent_dim: 0,
        })
        .collect()
}

fn toy_cfgs() -> (ModelConfig, TrainConfig) {
    let m = ModelConfig::new(4, 4, 3, 1);
    let t =
        TrainConfig { iterations: 5, batch_size: 3, n_negatives: Some(3), log_interval: 2, ..TrainConfig::default() };
    (m, t)
}

// ── Positive sampling ────────────────────────────────────────────────

#[test]
fn positive_offsets_are_nonzero_and_overlap() {
    let mut r = rng(1);
    for _ in 0..2000 {
        let t0 = r.random_range(0..=15);
        let d = sample_positive(20, t0, 5, 3, &mut r).unwrap();
        assert!(d != 0 && d.abs() <= 3);
        let start = t0 as isize + d;
        assert!(start >= 0 && start + 5 <= 20);
        // Overlap of [t0, t0+5) and [start, start+5) is 5 − |Δ| ≥ 2.
        assert!(5 - d.abs() >= 2);
    }
}

#[test]
fn negative_offset_at_start_is_reflected() {
    let mut r = rng(2);
    let mut freq = BTreeMap::new();
    for _ in 0..30_000 {
        let d = sample_positive(100, 0, 5, 3, &mut r).unwrap();
        assert!(d > 0);
        *freq.entry(d).or_insert(0usize) += 1;
    }
    // Reflection keeps |Δ| uniform on 1..=3.
    for (&d, &c) in &freq {
        let p: f64 = 1.0 / 3.0;
        let sd = (30_000.0 * p * (1.0 - p)).sqrt();
        assert!((c as f64 - 10_000.0).abs() < 4.0 * sd, "Δ={d}: {c}");
    }
}

#[test]
fn positive_redraw_when_reflection_fails() {
    let mut r = rng(3);
    for _ in 0..200 {
        // Only start 1 is admissible besides the anchor's own.
        assert_eq!(sample_positive(6, 0, 5, 3, &mut r).unwrap(), 1);
    }
    assert!(sample_positive(5, 0, 5, 3, &mut r).is_err());
    assert!(sample_positive(4, 0, 5, 3, &mut r).is_err());
    assert_eq!(sample_positive(1, 0, 1, 0, &mut r).unwrap(), 0);
}

#[test]
fn positive_is_symmetric_in_the_interior() {
    let mut r = rng(4);
    let draws: Vec<isize> = (0..20_000).map(|_| sample_positive(100, 50, 5, 3, &mut r).unwrap()).collect();
    let neg = draws.iter().filter(|&&d| d < 0).count() as f64;
    assert!((neg - 10_000.0).abs() < 4.0 * (20_000.0f64 * 0.25).sqrt());
}

// ── Window sampling ──────────────────────────────────────────────────

#[test]
fn single_window_set() {
    let trials = toy_trials(1, 3, 2, 0);
    let s = WindowSampler::new(&trials, 3).unwrap();
    assert_eq!(s.total(), 1);
    assert_eq!(sample_negatives(&s, 1, &mut rng(0)), vec![Window { trial: 0, start: 0 }]);
    assert!(WindowSampler::new(&trials, 4).is_err());
}

#[test]
fn window_indexing_covers_all_pairs() {
    let trials =
        vec![toy_trials(1, 5, 2, 0)[0].clone(), toy_trials(1, 3, 2, 1)[0].clone(), toy_trials(1, 6, 2, 2)[0].clone()];
    let s = WindowSampler::new(&trials, 3).unwrap();
    let all: Vec<Window> = (0..s.total()).map(|k| s.window(k)).collect();
    let want: Vec<Window> = [(0, 3), (1, 1), (2, 4)]
        .iter()
        .flat_map(|&(t, n)| (0..n).map(move |start| Window { trial: t, start }))
        .collect();
    assert_eq!(all, want);
}

#[test]
fn negatives_uniform_over_trials() {
    let trials = toy_trials(5, 10, 2, 0);
    let s = WindowSampler::new(&trials, 4).unwrap();
    let draws = sample_negatives(&s, 10_000, &mut rng(9));
    let p: f64 = 0.2;
    let sd = (10_000.0 * p * (1.0 - p)).sqrt();
    for t in 0..5 {
        let c = draws.iter().filter(|w| w.trial == t).count() as f64;
        assert!((c - 2000.0).abs() < 3.0 * sd, "trial {t}: {c}");
    }
}

#[test]
fn stacked_windows_hold_counts() {
    let trials = toy_trials(2, 6, 3, 5);
    let ws = [Window { trial: 1, start: 2 }, Window { trial: 0, start: 0 }];
    let x = stack_windows(&trials, &ws, 3);
    assert_eq!(x.len(), 3);
    for k in 0..3 {
        assert_eq!(x[k].row_slice(0), trials[1].bin(2 + k).iter().map(|&c| c as f64).collect::<Vec<_>>().as_slice());
        assert_eq!(x[k].row_slice(1), trials[0].bin(k).iter().map(|&c| c as f64).collect::<Vec<_>>().as_slice());
    }
}

// ── Adam ─────────────────────────────────────────────────────────────

fn store() -> crate::model::ParamStore {
    let mut s = crate::model::ParamStore::default();
    s.push("w", Tensor::row(&[1.0, -2.0, 0.5]));
    s.push("b", Tensor::row(&[0.25]));
    s
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let mut p = store();
    let before = p.clone();
    let mut a = Adam::new(&p, 0.1, 0.9, 0.999, 1e-8);
    for _ in 0..3 {
        a.step(&mut p, &[Tensor::zeros(&[1, 3]), Tensor::zeros(&[1, 1])]).unwrap();
    }
    assert_eq!(p, before);
}

#[test]
fn adam_first_step_is_lr_times_sign() {
    let mut p = store();
    let mut a = Adam::new(&p, 0.01, 0.9, 0.999, 1e-8);
    let g = [Tensor::row(&[3.0, -0.5, 1e-3]), Tensor::row(&[-7.0])];
    a.step(&mut p, &g).unwrap();
    let step = |g: f64| 0.01 * g / (g.abs() + 1e-8);
    let want = [1.0 - step(3.0), -2.0 - step(-0.5), 0.5 - step(1e-3)];
    for (v, w) in p.get(0).data().iter().zip(want) {
        assert!((v - w).abs() < 1e-12, "{v} vs {w}");
    }
    assert!((p.get(1).data()[0] - (0.25 - step(-7.0))).abs() < 1e-15);
    assert!((p.get(0).data()[0] - 0.99).abs() < 1e-9);
}

#[test]
fn adam_matches_hand_second_step() {
    let mut p = crate::model::ParamStore::default();
    p.push("x", Tensor::row(&[0.0]));
    let mut a = Adam::new(&p, 0.1, 0.9, 0.999, 1e-8);
    a.step(&mut p, &[Tensor::row(&[1.0])]).unwrap();
    a.step(&mut p, &[Tensor::row(&[-1.0])]).unwrap();
    // m2 = 0.9·0.1 − 0.1 = −0.01, v2 = 0.999·0.001 + 0.001 = 0.001999
    let m = -0.01 / (1.0 - 0.81);
    let v = 0.001999 / (1.0 - 0.999f64.powi(2));
    let want = -0.1 / (1.0 + 1e-8) - 0.1 * m / (v.sqrt() + 1e-8);
    assert!((p.get(0).data()[0] - want).abs() < 1e-12);
}

#[test]
fn adam_rejects_nonfinite_gradient_by_name() {
    let mut p = store();
    let before = p.clone();
    let mut a = Adam::new(&p, 0.1, 0.9, 0.999, 1e-8);
    let e = a.step(&mut p, &[Tensor::zeros(&[1, 3]), Tensor::row(&[f64::NAN])]).unwrap_err();
    assert!(matches!(e, TrainError::NonFiniteGradient { ref param } if param == "b"));
    assert_eq!(p, before);
    assert_eq!(a.steps(), 0);
}

// ── Training loop ────────────────────────────────────────────────────

#[test]
fn zero_iterations_returns_initialization() {
    let (m, mut t) = toy_cfgs();
    t.iterations = 0;
    let out = train(m.clone(), t.clone(), &toy_trials(3, 8, 4, 0), |_, _| Ok(())).unwrap();
    assert_eq!(out.model, Model::new(m, t.seed).unwrap());
    assert!(out.log.is_empty());
}

#[test]
fn training_is_bit_reproducible() {
    let (m, t) = toy_cfgs();
    let data = toy_trials(3, 8, 4, 0);
    let a = train(m.clone(), t.clone(), &data, |_, _| Ok(())).unwrap();
    let b = train(m, t, &data, |_, _| Ok(())).unwrap();
    assert_eq!(a.model.to_bytes(), b.model.to_bytes());
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![1, 2, 4, 5]);
}

#[test]
fn checkpoint_callback_runs_on_interval() {
    let (m, mut t) = toy_cfgs();
    t.checkpoint_interval = 2;
    let mut seen = Vec::new();
    train(m, t, &toy_trials(3, 8, 4, 0), |it, model| {
        seen.push((it, model.to_bytes().len()));
        Ok(())
    })
    .unwrap();
    assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![2, 4]);
    let (m, mut t) = toy_cfgs();
    t.checkpoint_interval = 1;
    let e = train(m, t, &toy_trials(3, 8, 4, 0), |_, _| Err("disk full".into()));
    assert!(matches!(e, Err(TrainError::Checkpoint(_))));
}

#[test]
fn dimension_mismatch_is_named() {
    let (m, t) = toy_cfgs();
    let e = train(m, t, &toy_trials(3, 8, 5, 0), |_, _| Ok(())).err().unwrap();
    assert!(matches!(e, TrainError::Data(ref s) if s.contains("5 neurons")));
}

#[test]
fn short_trials_are_excluded() {
    let mut trials = toy_trials(2, 8, 4, 0);
    trials.push(toy_trials(1, 3, 4, 1)[0].clone());
    assert_eq!(usable_trials(&trials, 3).len(), 2);
    assert_eq!(usable_trials(&trials, 1).len(), 3);
}

#[test]
fn overfit_single_batch() {
    let m = ModelConfig::new(4, 4, 3, 1);
    let t = TrainConfig { batch_size: 4, n_negatives: Some(3), learning_rate: 5e-3, ..TrainConfig::default() };
    let data = toy_trials(4, 10, 4, 7);
    let mut trainer = Trainer::new(m, t).unwrap();
    let sampler = WindowSampler::new(&data, 3).unwrap();
    let batch = trainer.sample_batch(&data, &sampler).unwrap();
    let rows = 2 * 4 + batch.negatives.first().map_or(0, Tensor::rows);
    let noise: Vec<Tensor> = (0..3).map(|_| Tensor::zeros(&[rows, 2])).collect();
    let first = trainer.step(&batch, Some(&noise)).unwrap().total;
    let mut prev = first;
    let mut last = first;
    for it in 1..500 {
        last = trainer.step(&batch, Some(&noise)).unwrap().total;
        if it < 50 {
            assert!(last < prev, "iteration {it}: {last} ≥ {prev}");
        }
        prev = last;
    }
    assert!(last <= 0.5 * first, "{first} → {last}");
}

#[test]
fn ablation_variants_train() {
    let data = toy_trials(3, 8, 4, 0);
    let variants = [
        (ContrastMode::Full, true, PriorKind::TimeDependent, CellKind::Gru),
        (ContrastMode::PositiveOnly, true, PriorKind::TimeDependent, CellKind::Gru),
        (ContrastMode::Off, true, PriorKind::TimeDependent, CellKind::Gru),
        (ContrastMode::Full, false, PriorKind::TimeDependent, CellKind::Gru),
        (ContrastMode::Full, true, PriorKind::StandardNormal, CellKind::Gru),
        (ContrastMode::Full, true, PriorKind::TimeDependent, CellKind::Rnn),
        (ContrastMode::Full, true, PriorKind::TimeDependent, CellKind::Lstm),
    ];
    for (contrast, swap, prior, cell) in variants {
        let (mut m, mut t) = toy_cfgs();
        m.prior = prior;
        m.cell = cell;
        t.contrast = contrast;
        t.swap = swap;
        t.iterations = 2;
        let out = train(m, t, &data, |_, _| Ok(())).unwrap();
        let last = out.log.last().unwrap().loss;
        assert!(last.total.is_finite());
        assert_eq!(last.contrast == 0.0, contrast == ContrastMode::Off);
        assert_eq!(last.swap_recons == 0.0, !swap);
        if prior == PriorKind::StandardNormal {
            assert_eq!(last.prior_l2, 0.0);
        }
    }
}

#[test]
fn single_bin_trials_train() {
    let m = ModelConfig::new(4, 4, 1, 0);
    let t = TrainConfig { iterations: 3, batch_size: 4, ..TrainConfig::default() };
    let out = train(m, t, &toy_trials(10, 1, 4, 2), |_, _| Ok(())).unwrap();
    assert!(out.log.iter().all(|r| r.loss.total.is_finite()));
}

#[test]
fn nonfinite_loss_names_term() {
    let (m, t) = toy_cfgs();
    let mut model = Model::new(m, 0).unwrap();
    model.set_param("prior.bias", Tensor::row(&[1e300, 0.0, 0.0, 0.0])).unwrap();
    let data = toy_trials(3, 8, 4, 0);
    let mut trainer = Trainer::from_model(model, t).unwrap();
    let sampler = WindowSampler::new(&data, 3).unwrap();
    let batch = trainer.sample_batch(&data, &sampler).unwrap();
    let e = trainer.step(&batch, None).unwrap_err();
    assert!(e.is_numerical());
    assert!(
        matches!(e, TrainError::NonFiniteLoss { iteration: 1, ref term } if term == "regular" || term == "prior_l2"),
        "{e}"
    );
}

#[test]
fn trains_on_lorenz_windows() {
    let spec =
        LorenzSpec { n_bins: 120, n_conditions: 2, trials_per_condition: 3, n_neurons: 6, ..LorenzSpec::default() };
    let b = gen_lorenz(&spec).unwrap();
    let m = ModelConfig::new(6, 4, 10, 3);
    let t = TrainConfig { iterations: 3, batch_size: 4, n_negatives: Some(6), ..TrainConfig::default() };
    let out = train(m, t, &b.train, |_, _| Ok(())).unwrap();
    assert_eq!(out.log.len(), 2);
}

// ── Objective gradient check ─────────────────────────────────────────

#[test]
fn objective_gradcheck_passes_on_toy_problem() {
    let start = std::time::Instant::now();
    let setup = GradCheckSetup::default();
    let r = gradcheck_objective(&setup, None).unwrap();
    assert!(r.passed(), "{r:?}");
    assert_eq!(
        r.terms.iter().map(|t| t.name.as_str()).collect::<Vec<_>>(),
        ["total", "recons", "regular", "contrast", "swap_recons", "prior_l2"]
    );
    let model = Model::new(setup.model.clone(), setup.seed).unwrap();
    let names: Vec<&str> = (0..model.params().len()).map(|i| model.params().name(i)).collect();
    assert_eq!(r.params.iter().map(|p| p.name.as_str()).collect::<Vec<_>>(), names);
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn corrupted_gradient_fails_check() {
    let r = gradcheck_objective(&GradCheckSetup::default(), Some(0.01)).unwrap();
    assert!(!r.passed());
    assert!(r.params[0].max_rel_error > 1e-3);
}
