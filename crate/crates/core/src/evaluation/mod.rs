//! Reconstruction scores against ground-truth latents, KNN decoding of
//! classes and frames, and latent export.

mod knn;
mod regression;

use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::format::{self, FormatError};
use crate::model::{Model, ModelError};
use crate::numerics::Tensor;
use crate::synthdata::{DatasetBundle, SpikeSequence};

pub use knn::{
    knn_decode, knn_predict, nearest, vote, windowed_frame_accuracy, ClassScore, DecodingResult, KScore, Points,
    K_CANDIDATES,
};
pub use regression::{
    fit_affine, r_squared, reconstruction_score, reconstruction_score_held_out, LinearFit, ReconstructionScore,
    RIDGE_EPS,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty {0}")]
    Empty(String),
    #[error("missing data: {0}")]
    Missing(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Which latent block feeds a decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LatentBlock {
    #[default]
    Content,
    Style,
    Both,
}

impl FromStr for LatentBlock {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "content" => Ok(Self::Content),
            "style" => Ok(Self::Style),
            "both" => Ok(Self::Both),
            _ => Err(format!("unknown latent block {s:?} (content, style or both)")),
        }
    }
}

/// Per-step latents of one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialLatents {
    /// `T × M_c`
    pub content: Tensor,
    /// `T × M_s`, posterior means.
    pub style: Tensor,
}

impl TrialLatents {
    pub fn len(&self) -> usize {
        self.content.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Selected block; `Both` places content columns first.
    pub fn block(&self, which: LatentBlock) -> Tensor {
        match which {
            LatentBlock::Content => self.content.clone(),
            LatentBlock::Style => self.style.clone(),
            LatentBlock::Both => {
                let (t, c, s) = (self.len(), self.content.cols(), self.style.cols());
                let mut data = Vec::with_capacity(t * (c + s));
                for r in 0..t {
                    data.extend_from_slice(self.content.row_slice(r));
                    data.extend_from_slice(self.style.row_slice(r));
                }
                Tensor::matrix(t, c + s, data).expect("t × (c + s)")
            }
        }
    }
}

const ENCODE_ROWS: usize = 1024;

/// Deterministic latents for every bin of every trial. With `order` set,
/// each bin is inferred from a window of that many preceding bins;
/// otherwise each trial is unrolled once from its first bin.
pub fn trial_latents(
    model: &Model,
    trials: &[SpikeSequence],
    order: Option<usize>,
) -> Result<Vec<TrialLatents>, EvalError> {
    let n = model.config().n_neurons;
    if let Some(s) = trials.iter().find(|s| s.n_neurons != n) {
        return Err(EvalError::Shape(format!("data has {} neurons, model expects {n}", s.n_neurons)));
    }
    if let Some(i) = trials.iter().position(|s| s.is_empty()) {
        return Err(EvalError::Empty(format!("trial {i}")));
    }
    if let Some(order) = order {
        return trials
            .iter()
            .map(|s| {
                let t = model.infer_windowed_latents(&s.counts_tensor(), order)?;
                Ok(TrialLatents { content: t.z_content, style: t.z_style })
            })
            .collect();
    }
    let mut out: Vec<Option<TrialLatents>> = vec![None; trials.len()];
    let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in trials.iter().enumerate() {
        by_len.entry(s.len()).or_default().push(i);
    }
    for (len, members) in by_len {
        for chunk in members.chunks(ENCODE_ROWS) {
            let xs: Vec<Tensor> = (0..len)
                .map(|t| {
                    let mut data = Vec::with_capacity(chunk.len() * n);
                    for &i in chunk {
                        data.extend(trials[i].bin(t).iter().map(|&c| c as f64));
                    }
                    Tensor::matrix(chunk.len(), n, data).expect("rows × n")
                })
                .collect();
            let steps = model.encode_all(&xs)?;
            for (row, &i) in chunk.iter().enumerate() {
                let gather = |f: &dyn Fn(&crate::model::LatentTable) -> &Tensor| {
                    let cols = f(&steps[0]).cols();
                    let data: Vec<f64> = steps.iter().flat_map(|s| f(s).row_slice(row).to_vec()).collect();
                    Tensor::matrix(len, cols, data).expect("len × cols")
                };
                out[i] = Some(TrialLatents { content: gather(&|s| &s.z_content), style: gather(&|s| &s.z_style) });
            }
        }
    }
    Ok(out.into_iter().map(|t| t.expect("every trial encoded")).collect())
}

/// Concatenation of the latents at `window` steps, in time order.
pub fn scene_representation(latents: &Tensor, window: Range<usize>) -> Result<Vec<f64>, EvalError> {
    if window.is_empty() || window.end > latents.rows() {
        return Err(EvalError::Shape(format!("window {window:?} outside a trial of {} steps", latents.rows())));
    }
    Ok(window.flat_map(|t| latents.row_slice(t).to_vec()).collect())
}

/// Mean latent over each frame's steps.
pub fn frame_representation(latents: &Tensor, frames: &[Range<usize>]) -> Result<Vec<Vec<f64>>, EvalError> {
    frames
        .iter()
        .map(|f| {
            if f.is_empty() || f.end > latents.rows() {
                return Err(EvalError::Shape(format!(
                    "frame {f:?} is empty or outside a trial of {} steps",
                    latents.rows()
                )));
            }
            let mut mean = vec![0.0; latents.cols()];
            for t in f.clone() {
                for (m, v) in mean.iter_mut().zip(latents.row_slice(t)) {
                    *m += v;
                }
            }
            let k = f.len() as f64;
            Ok(mean.into_iter().map(|m| m / k).collect())
        })
        .collect()
}

/// Consecutive frames of `steps_per_frame` bins; an incomplete tail is dropped.
pub fn consecutive_frames(len: usize, steps_per_frame: usize) -> Vec<Range<usize>> {
    if steps_per_frame == 0 {
        return Vec::new();
    }
    (0..len / steps_per_frame).map(|f| f * steps_per_frame..(f + 1) * steps_per_frame).collect()
}

/// Splits off every tenth trial as a validation set, or the last trial
/// when there are fewer than ten.
pub fn carve_validation(train: &[SpikeSequence]) -> (Vec<SpikeSequence>, Vec<SpikeSequence>) {
    let (mut keep, mut val) = (Vec::new(), Vec::new());
    let short = train.len() < 10;
    for (i, s) in train.iter().enumerate() {
        if (!short && i % 10 == 9) || (short && i + 1 == train.len()) {
            val.push(s.clone());
        } else {
            keep.push(s.clone());
        }
    }
    (keep, val)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    #[default]
    Reconstruction,
    Scene,
    Movie,
}

impl FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "reconstruction" => Ok(Self::Reconstruction),
            "scene" => Ok(Self::Scene),
            "movie" => Ok(Self::Movie),
            _ => Err(format!("unknown protocol {s:?} (reconstruction, scene or movie)")),
        }
    }
}

fn default_scene_window() -> usize {
    20
}
fn default_steps_per_frame() -> usize {
    4
}

/// Settings for one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default)]
    pub protocol: Protocol,
    #[serde(default)]
    pub latents: LatentBlock,
    /// Sliding-window inference order; full-trial unroll when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub markov_order: Option<usize>,
    /// Scene representations concatenate this many final steps.
    #[serde(default = "default_scene_window")]
    pub scene_window: usize,
    #[serde(default = "default_steps_per_frame")]
    pub steps_per_frame: usize,
    /// Movie decoding tolerance in frames.
    #[serde(default)]
    pub window_frames: u32,
    /// Fit the reconstruction map on training trials and score on test
    /// trials instead of fitting and scoring on test trials.
    #[serde(default)]
    pub held_out: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            protocol: Protocol::default(),
            latents: LatentBlock::default(),
            markov_order: None,
            scene_window: default_scene_window(),
            steps_per_frame: default_steps_per_frame(),
            window_frames: 0,
            held_out: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EvalRecord {
    Reconstruction(ReconstructionScore),
    Decoding(DecodingResult),
}

impl EvalRecord {
    /// R² or accuracy.
    pub fn headline(&self) -> f64 {
        match self {
            Self::Reconstruction(r) => r.r_squared,
            Self::Decoding(d) => d.accuracy,
        }
    }
}

fn stack_rows(parts: &[Tensor]) -> Result<Tensor, EvalError> {
    let cols = parts.first().map_or(0, Tensor::cols);
    let mut data = Vec::new();
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::matrix(data.len() / cols.max(1), cols, data).map_err(|e| EvalError::Shape(e.to_string()))
}

fn truth_of(trials: &[SpikeSequence]) -> Result<Tensor, EvalError> {
    let d = trials.first().map_or(0, |s| s.latent_dim);
    if d == 0 || trials.iter().any(|s| s.latent_dim != d) {
        return Err(EvalError::Missing("trials carry no ground-truth latents".into()));
    }
    let data: Vec<f64> = trials.iter().flat_map(|s| s.latents.iter().copied()).collect();
    Ok(Tensor::matrix(data.len() / d, d, data).expect("points × d"))
}

fn latents_of(model: &Model, trials: &[SpikeSequence], spec: &EvalSpec) -> Result<Tensor, EvalError> {
    let lat = trial_latents(model, trials, spec.markov_order)?;
    stack_rows(&lat.iter().map(|l| l.block(spec.latents)).collect::<Vec<_>>())
}

/// R² of an affine map from model latents to ground-truth latents.
pub fn reconstruction(
    model: &Model,
    bundle: &DatasetBundle,
    spec: &EvalSpec,
) -> Result<ReconstructionScore, EvalError> {
    if bundle.test.is_empty() {
        return Err(EvalError::Empty("test partition".into()));
    }
    let x = latents_of(model, &bundle.test, spec)?;
    let y = truth_of(&bundle.test)?;
    if spec.held_out {
        let xf = latents_of(model, &bundle.train, spec)?;
        let yf = truth_of(&bundle.train)?;
        return reconstruction_score_held_out(&xf, &yf, &x, &y);
    }
    reconstruction_score(&x, &y)
}

fn partitions(bundle: &DatasetBundle) -> (Vec<SpikeSequence>, Vec<SpikeSequence>) {
    if bundle.validation.is_empty() {
        carve_validation(&bundle.train)
    } else {
        (bundle.train.clone(), bundle.validation.clone())
    }
}

fn scene_points(model: &Model, trials: &[SpikeSequence], spec: &EvalSpec) -> Result<Points, EvalError> {
    let lat = trial_latents(model, trials, spec.markov_order)?;
    let mut pts = Points::default();
    for (s, l) in trials.iter().zip(&lat) {
        let label = s.label.ok_or_else(|| EvalError::Missing("scene decoding needs trial labels".into()))?;
        let len = l.len();
        let w = spec.scene_window.min(len);
        pts.push(scene_representation(&l.block(spec.latents), len - w..len)?, label);
    }
    Ok(pts)
}

/// KNN decoding of trial labels from the final `scene_window` steps.
pub fn scene_decode(model: &Model, bundle: &DatasetBundle, spec: &EvalSpec) -> Result<DecodingResult, EvalError> {
    let (train, val) = partitions(bundle);
    knn_decode(
        &scene_points(model, &train, spec)?,
        &scene_points(model, &val, spec)?,
        &scene_points(model, &bundle.test, spec)?,
        0,
    )
}

fn frame_points(model: &Model, trials: &[SpikeSequence], spec: &EvalSpec) -> Result<Points, EvalError> {
    let lat = trial_latents(model, trials, spec.markov_order)?;
    let mut pts = Points::default();
    for l in &lat {
        let frames = consecutive_frames(l.len(), spec.steps_per_frame);
        for (f, rep) in frame_representation(&l.block(spec.latents), &frames)?.into_iter().enumerate() {
            pts.push(rep, f as u32);
        }
    }
    Ok(pts)
}

/// KNN decoding of the frame index within each trial, with a frame tolerance.
pub fn movie_decode(model: &Model, bundle: &DatasetBundle, spec: &EvalSpec) -> Result<DecodingResult, EvalError> {
    if spec.steps_per_frame == 0 {
        return Err(EvalError::Shape("steps_per_frame must be positive".into()));
    }
    let (train, val) = partitions(bundle);
    let mut r = knn_decode(
        &frame_points(model, &train, spec)?,
        &frame_points(model, &val, spec)?,
        &frame_points(model, &bundle.test, spec)?,
        spec.window_frames,
    )?;
    r.window_frames = Some(spec.window_frames);
    Ok(r)
}

pub fn evaluate(model: &Model, bundle: &DatasetBundle, spec: &EvalSpec) -> Result<EvalRecord, EvalError> {
    if bundle.n_neurons() != model.config().n_neurons {
        return Err(EvalError::Shape(format!(
            "data has {} neurons, model expects {}",
            bundle.n_neurons(),
            model.config().n_neurons
        )));
    }
    Ok(match spec.protocol {
        Protocol::Reconstruction => EvalRecord::Reconstruction(reconstruction(model, bundle, spec)?),
        Protocol::Scene => EvalRecord::Decoding(scene_decode(model, bundle, spec)?),
        Protocol::Movie => EvalRecord::Decoding(movie_decode(model, bundle, spec)?),
    })
}

/// Runs `spec` restricted to one latent block.
pub fn evaluate_content_style_split(
    model: &Model,
    bundle: &DatasetBundle,
    which: LatentBlock,
    spec: &EvalSpec,
) -> Result<EvalRecord, EvalError> {
    evaluate(model, bundle, &EvalSpec { latents: which, ..spec.clone() })
}

pub fn checkpoint_sha256(model: &Model) -> String {
    hex::encode(Sha256::digest(model.to_bytes()))
}

/// Header of a latent dump file. Each row's latents are
/// `[content | style | truth]` with the widths recorded here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpHeader {
    pub kind: String,
    pub checkpoint_sha256: String,
    pub dataset_sha256: String,
    pub partition: String,
    pub content_dim: usize,
    pub style_dim: usize,
    pub truth_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub markov_order: Option<usize>,
}

/// Trials carrying the model's per-step latents followed by any ground truth.
pub fn latent_dump(
    model: &Model,
    trials: &[SpikeSequence],
    order: Option<usize>,
) -> Result<Vec<SpikeSequence>, EvalError> {
    let lat = trial_latents(model, trials, order)?;
    Ok(trials
        .iter()
        .zip(&lat)
        .map(|(s, l)| {
            let d = l.content.cols() + l.style.cols() + s.latent_dim;
            let mut latents = Vec::with_capacity(s.len() * d);
            for t in 0..s.len() {
                latents.extend_from_slice(l.content.row_slice(t));
                latents.extend_from_slice(l.style.row_slice(t));
                latents.extend_from_slice(s.latent(t));
            }
            SpikeSequence { n_neurons: s.n_neurons, counts: s.counts.clone(), label: s.label, latents, latent_dim: d }
        })
        .collect())
}

/// Writes [`latent_dump`] of one partition to `path`.
pub fn dump_latents(
    model: &Model,
    bundle: &DatasetBundle,
    partition: &str,
    order: Option<usize>,
    path: &Path,
) -> Result<DumpHeader, EvalError> {
    let trials = bundle.partition(partition).ok_or_else(|| EvalError::Missing(format!("partition {partition:?}")))?;
    let header = DumpHeader {
        kind: "latent_dump".into(),
        checkpoint_sha256: checkpoint_sha256(model),
        dataset_sha256: bundle.manifest.sha256(),
        partition: partition.into(),
        content_dim: model.config().content_dim(),
        style_dim: model.config().style_dim(),
        truth_dim: trials.first().map_or(0, |s| s.latent_dim),
        markov_order: order,
    };
    let rows = latent_dump(model, trials, order)?;
    format::write_file(path, &serde_json::to_string(&header).expect("header serializes"), &rows)?;
    Ok(header)
}

/// Everything an evaluation run reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset_sha256: String,
    pub checkpoint_sha256: String,
    pub spec: EvalSpec,
    pub record: EvalRecord,
    /// Configuration echo supplied by the caller.
    #[serde(default)]
    pub config: serde_json::Value,
}
