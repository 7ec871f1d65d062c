//! Window sampling for anchors, positives and negatives.

use rand::Rng;

use crate::numerics::Tensor;
use crate::synthdata::SpikeSequence;

use super::TrainError;

/// A window of `len` bins of trial `trial` starting at `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub trial: usize,
    pub start: usize,
}

/// Offset of the positive window relative to an anchor at `t0`.
///
/// `Δ` is uniform on `{−Δ_max..Δ_max} \ {0}`. An offset that would leave
/// the trial has its sign reflected; if that also leaves the trial, `Δ`
/// is redrawn uniformly from the admissible nonzero offsets. With
/// `t_seq == 1` the positive is the anchor itself and `Δ = 0`.
pub fn sample_positive(
    trial_len: usize,
    t0: usize,
    t_seq: usize,
    max_offset: usize,
    rng: &mut impl Rng,
) -> Result<isize, TrainError> {
    if trial_len < t_seq || t0 + t_seq > trial_len {
        return Err(TrainError::Data(format!(
            "window [{t0}, {}) does not fit a trial of {trial_len} bins",
            t0 + t_seq
        )));
    }
    if t_seq == 1 {
        return Ok(0);
    }
    if max_offset == 0 || max_offset >= t_seq {
        return Err(TrainError::Config(format!("max_offset must lie in 1..{t_seq}, got {max_offset}")));
    }
    let last = (trial_len - t_seq) as isize;
    let fits = |d: isize| (0..=last).contains(&(t0 as isize + d));
    let m = max_offset as isize;
    let mut d = rng.random_range(1..=max_offset as u64) as isize;
    if rng.random_bool(0.5) {
        d = -d;
    }
    if fits(d) {
        return Ok(d);
    }
    if fits(-d) {
        return Ok(-d);
    }
    let admissible: Vec<isize> = (-m..=m).filter(|&d| d != 0 && fits(d)).collect();
    if admissible.is_empty() {
        return Err(TrainError::Data(format!("trial of {trial_len} bins admits no positive for windows of {t_seq}")));
    }
    Ok(admissible[rng.random_range(0..admissible.len())])
}

/// Uniform draws over all `(trial, start)` pairs of `trials`.
#[derive(Clone, Debug)]
pub struct WindowSampler {
    /// Cumulative window counts per trial.
    cumulative: Vec<usize>,
    t_seq: usize,
}

impl WindowSampler {
    pub fn new(trials: &[SpikeSequence], t_seq: usize) -> Result<Self, TrainError> {
        let mut cumulative = Vec::with_capacity(trials.len());
        let mut total = 0;
        for s in trials {
            total += (s.len() + 1).saturating_sub(t_seq);
            cumulative.push(total);
        }
        if total == 0 {
            return Err(TrainError::Data(format!("no training windows of length {t_seq}")));
        }
        Ok(Self { cumulative, t_seq })
    }

    pub fn total(&self) -> usize {
        *self.cumulative.last().expect("nonempty")
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Window {
        self.window(rng.random_range(0..self.total()))
    }

    /// The `k`-th window in (trial, start) order.
    pub fn window(&self, k: usize) -> Window {
        let trial = self.cumulative.partition_point(|&c| c <= k);
        let before = if trial == 0 { 0 } else { self.cumulative[trial - 1] };
        Window { trial, start: k - before }
    }

    pub fn t_seq(&self) -> usize {
        self.t_seq
    }
}

/// `count` windows drawn uniformly over the training set. Windows may
/// coincide with an anchor.
pub fn sample_negatives(sampler: &WindowSampler, count: usize, rng: &mut impl Rng) -> Vec<Window> {
    (0..count).map(|_| sampler.sample(rng)).collect()
}

/// Stacks windows into one `rows × N` tensor per time step.
pub fn stack_windows(trials: &[SpikeSequence], windows: &[Window], t_seq: usize) -> Vec<Tensor> {
    let n = trials.first().map_or(0, |s| s.n_neurons);
    (0..t_seq)
        .map(|k| {
            let mut data = Vec::with_capacity(windows.len() * n);
            for w in windows {
                data.extend(trials[w.trial].bin(w.start + k).iter().map(|&c| c as f64));
            }
            Tensor::matrix(windows.len(), n, data).expect("rows × N")
        })
        .collect()
}
