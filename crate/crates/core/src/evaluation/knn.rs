//! K-nearest-neighbour decoding with validation-selected `k`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Odd neighbour counts searched on the validation set.
pub const K_CANDIDATES: [usize; 10] = [1, 3, 5, 7, 9, 11, 13, 15, 17, 19];

/// Representations with one label each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Points {
    pub reps: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
}

impl Points {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, rep: Vec<f64>, label: u32) {
        self.reps.push(rep);
        self.labels.push(label);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KScore {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: u32,
    pub correct: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodingResult {
    /// Test accuracy at `chosen_k`.
    pub accuracy: f64,
    pub chosen_k: usize,
    pub validation: Vec<KScore>,
    pub per_class: Vec<ClassScore>,
    /// Frame tolerance for movie decoding; `None` for exact class decoding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_frames: Option<u32>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest training points, nearest first. Equal
/// distances order by index.
pub fn nearest(train: &Points, query: &[f64], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> =
        train.reps.iter().enumerate().map(|(i, r)| (squared_distance(r, query), i)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let k = k.min(d.len());
    if k == 0 {
        return Vec::new();
    }
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, cmp);
        d.truncate(k);
    }
    d.sort_unstable_by(cmp);
    d.into_iter().map(|(_, i)| i).collect()
}

/// Majority label among the first `k` of `neighbours`. A tie goes to the
/// tied label whose nearest member comes first.
pub fn vote(train: &Points, neighbours: &[usize], k: usize) -> u32 {
    let mut counts: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (rank, &i) in neighbours[..k].iter().enumerate() {
        let e = counts.entry(train.labels[i]).or_insert((0, rank));
        e.0 += 1;
    }
    counts.into_iter().max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1))).expect("k ≥ 1").0
}

pub fn knn_predict(train: &Points, query: &[f64], k: usize) -> u32 {
    vote(train, &nearest(train, query, k), k)
}

fn hit(pred: u32, truth: u32, tolerance: u32) -> bool {
    pred.abs_diff(truth) <= tolerance
}

fn check_dims(sets: [&Points; 3]) -> Result<usize, EvalError> {
    let dim = sets[0].reps.first().map(Vec::len).ok_or_else(|| EvalError::Empty("training set".into()))?;
    for (name, s) in ["train", "validation", "test"].iter().zip(sets) {
        if s.is_empty() {
            return Err(EvalError::Empty(format!("{name} set")));
        }
        if s.reps.len() != s.labels.len() {
            return Err(EvalError::Shape(format!(
                "{name} set has {} points but {} labels",
                s.reps.len(),
                s.labels.len()
            )));
        }
        if let Some(r) = s.reps.iter().find(|r| r.len() != dim) {
            return Err(EvalError::Shape(format!("{name} representation has {} dims, expected {dim}", r.len())));
        }
    }
    Ok(dim)
}

/// Predictions of `query` for every usable `k`, in [`K_CANDIDATES`] order.
fn predictions(train: &Points, query: &Points, ks: &[usize]) -> Vec<Vec<u32>> {
    let kmax = ks.last().copied().unwrap_or(0);
    let mut out = vec![Vec::with_capacity(query.len()); ks.len()];
    for q in &query.reps {
        let nb = nearest(train, q, kmax);
        for (j, &k) in ks.iter().enumerate() {
            out[j].push(vote(train, &nb, k));
        }
    }
    out
}

fn accuracy(pred: &[u32], truth: &[u32], tolerance: u32) -> f64 {
    pred.iter().zip(truth).filter(|(&p, &t)| hit(p, t, tolerance)).count() as f64 / truth.len() as f64
}

/// Chooses `k` by validation accuracy (ties → smaller `k`) and reports test
/// accuracy at that `k`. A prediction counts as correct when it is within
/// `tolerance` of the true label; use 0 for class labels.
pub fn knn_decode(
    train: &Points,
    validation: &Points,
    test: &Points,
    tolerance: u32,
) -> Result<DecodingResult, EvalError> {
    check_dims([train, validation, test])?;
    let ks: Vec<usize> = K_CANDIDATES.iter().copied().filter(|&k| k <= train.len()).collect();
    let val_pred = predictions(train, validation, &ks);
    let scores: Vec<KScore> = ks
        .iter()
        .zip(&val_pred)
        .map(|(&k, p)| KScore { k, accuracy: accuracy(p, &validation.labels, tolerance) })
        .collect();
    let best = scores.iter().fold(&scores[0], |b, s| if s.accuracy > b.accuracy { s } else { b });
    let chosen_k = best.k;
    let test_pred: Vec<u32> = test.reps.iter().map(|q| knn_predict(train, q, chosen_k)).collect();
    let mut per: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (&p, &t) in test_pred.iter().zip(&test.labels) {
        let e = per.entry(t).or_default();
        e.0 += hit(p, t, tolerance) as usize;
        e.1 += 1;
    }
    Ok(DecodingResult {
        accuracy: accuracy(&test_pred, &test.labels, tolerance),
        chosen_k,
        validation: scores,
        per_class: per.into_iter().map(|(label, (correct, total))| ClassScore { label, correct, total }).collect(),
        window_frames: None,
    })
}

/// Fraction of predictions within `window_frames` of the truth (inclusive).
pub fn windowed_frame_accuracy(predicted: &[u32], truth: &[u32], window_frames: u32) -> Result<f64, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::Shape(format!("{} predictions for {} frames", predicted.len(), truth.len())));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    Ok(accuracy(predicted, truth, window_frames))
}
