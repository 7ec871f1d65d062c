//! Training objective: Poisson reconstruction, Gaussian KL, contrastive and
//! swap terms, and a penalty on the prior parameters.
//!
//! Per-term reductions: reconstruction and KL are means over neurons (or
//! latent dimensions) and batch rows, then means over time, summed over the
//! two members of each positive pair. The standalone [`gaussian_kl`] sums over
//! dimensions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Forward, GaussianParams, ModelConfig, ModelError, StepNodes, StyleSampling};
use crate::numerics::{Graph, NodeId, NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("non-positive Poisson rate {value} at index {index}")]
    NonPositiveRate { index: usize, value: f64 },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("loss term `{term}` failed: {source}")]
    Term { term: &'static str, source: NumericsError },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which contrastive term enters the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContrastMode {
    /// NT-Xent with negatives.
    #[default]
    Full,
    /// Cosine distance between positive pairs only.
    PositiveOnly,
    Off,
}

/// Loss weights and ablation switches.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub beta: f64,
    pub gamma: f64,
    pub prior_l2: f64,
    pub tau: f64,
    pub contrast: ContrastMode,
    pub swap: bool,
}

impl LossConfig {
    /// Weights from the model config, full contrast and swap enabled.
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            beta: cfg.beta,
            gamma: cfg.gamma,
            prior_l2: cfg.prior_l2,
            tau: cfg.tau,
            contrast: ContrastMode::Full,
            swap: true,
        }
    }
}

/// Scalar values of every loss term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recons: f64,
    pub regular: f64,
    pub contrast: f64,
    pub swap_recons: f64,
    pub prior_l2: f64,
    pub total: f64,
}

/// Graph nodes of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub recons: NodeId,
    pub regular: NodeId,
    pub contrast: NodeId,
    pub swap_recons: NodeId,
    pub prior_l2: NodeId,
    pub total: NodeId,
}

impl LossNodes {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        let v = |n: NodeId| g.value(n).data()[0];
        LossBreakdown {
            recons: v(self.recons),
            regular: v(self.regular),
            contrast: v(self.contrast),
            swap_recons: v(self.swap_recons),
            prior_l2: v(self.prior_l2),
            total: v(self.total),
        }
    }
}

/// Stirling correction for `log x!`: `x log x − x + ½ log(2πx)` above 1, else 0.
pub fn stirling(x: f64) -> f64 {
    if x > 1.0 {
        x * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI * x).ln()
    } else {
        0.0
    }
}

fn term<T>(name: &'static str, r: Result<T, NumericsError>) -> Result<T, ObjectiveError> {
    r.map_err(|source| ObjectiveError::Term { term: name, source })
}

// ── Graph builders ───────────────────────────────────────────────────

/// Mean over all entries of `r − x log r + S(x)`.
pub fn poisson_nll(g: &mut Graph, counts: NodeId, rates: NodeId) -> Result<NodeId, ObjectiveError> {
    if g.value(counts).shape() != g.value(rates).shape() {
        return Err(ObjectiveError::Shape(format!(
            "counts {:?} vs rates {:?}",
            g.value(counts).shape(),
            g.value(rates).shape()
        )));
    }
    if let Some((index, &value)) = g.value(rates).data().iter().enumerate().find(|(_, &r)| !(r > 0.0)) {
        return Err(ObjectiveError::NonPositiveRate { index, value });
    }
    let s = g.value(counts).map(stirling);
    let s = g.input(s);
    let log_r = g.log(rates)?;
    let x_log_r = g.mul(counts, log_r)?;
    let d = g.sub(rates, x_log_r)?;
    let d = g.add(d, s)?;
    Ok(g.mean(d)?)
}

/// Elementwise KL(q ‖ p) between diagonal Gaussians given as (mean, log var).
pub fn gaussian_kl_elements(g: &mut Graph, q: (NodeId, NodeId), p: (NodeId, NodeId)) -> Result<NodeId, NumericsError> {
    let diff = g.sub(q.0, p.0)?;
    let sq = g.square(diff)?;
    let var_q = g.exp(q.1)?;
    let num = g.add(sq, var_q)?;
    let neg_lp = g.neg(p.1)?;
    let inv_var_p = g.exp(neg_lp)?;
    let ratio = g.mul(num, inv_var_p)?;
    let t = g.sub(ratio, q.1)?;
    let t = g.add(t, p.1)?;
    let t = g.add_scalar(t, -1.0)?;
    g.scale(t, 0.5)
}

/// KL(q ‖ p) summed over every entry.
pub fn gaussian_kl(g: &mut Graph, q: (NodeId, NodeId), p: (NodeId, NodeId)) -> Result<NodeId, NumericsError> {
    let e = gaussian_kl_elements(g, q, p)?;
    g.sum(e)
}

/// Row-wise cosine similarity as an `m×1` column; zero-norm rows give 0.
pub fn cosine_rows(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
    let an = g.row_normalize(a)?;
    let bn = g.row_normalize(b)?;
    let p = g.mul(an, bn)?;
    g.sum_cols(p)
}

/// NT-Xent averaged over anchors.
///
/// Row `i` of `anchor` is paired with row `i` of `positive`; its negatives
/// are the rows `negatives[i]` of `candidates`. Every anchor needs the same
/// number of negatives.
pub fn nt_xent(
    g: &mut Graph,
    anchor: NodeId,
    positive: NodeId,
    candidates: NodeId,
    negatives: &[Vec<usize>],
    tau: f64,
) -> Result<NodeId, ObjectiveError> {
    if !(tau > 0.0) {
        return Err(ObjectiveError::Shape(format!("temperature must be positive, got {tau}")));
    }
    let b = g.value(anchor).rows();
    if negatives.len() != b {
        return Err(ObjectiveError::Shape(format!("{} negative lists for {} anchors", negatives.len(), b)));
    }
    let k = negatives.first().map_or(0, Vec::len);
    if negatives.iter().any(|n| n.len() != k) {
        return Err(ObjectiveError::Shape("anchors have differing numbers of negatives".into()));
    }
    let pos = cosine_rows(g, anchor, positive)?;
    let logits = if k == 0 {
        pos
    } else {
        let an = g.row_normalize(anchor)?;
        let cn = g.row_normalize(candidates)?;
        let sims = g.matmul_t(an, cn)?;
        let neg = g.gather_cols(sims, negatives.concat(), k)?;
        g.concat_cols(&[pos, neg])?
    };
    let logits = g.scale(logits, 1.0 / tau)?;
    let lse = g.log_sum_exp_cols(logits)?;
    let pos = g.scale(pos, 1.0 / tau)?;
    let per = g.sub(lse, pos)?;
    Ok(g.mean(per)?)
}

/// Mean over rows of `1 − cos(anchor, positive)`.
pub fn positive_only_loss(g: &mut Graph, anchor: NodeId, positive: NodeId) -> Result<NodeId, NumericsError> {
    let c = cosine_rows(g, anchor, positive)?;
    let d = g.neg(c)?;
    let d = g.add_scalar(d, 1.0)?;
    g.mean(d)
}

/// Mean of squared prior means and log-variances over all steps and entries.
pub fn prior_l2(g: &mut Graph, priors: &[(NodeId, NodeId)]) -> Result<NodeId, NumericsError> {
    if priors.is_empty() {
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    let parts: Vec<NodeId> = priors.iter().flat_map(|&(m, lv)| [m, lv]).collect();
    let all = g.concat_cols(&parts)?;
    let sq = g.square(all)?;
    g.mean(sq)
}

/// Swap reconstruction for a positive pair of trajectories.
///
/// Decodes `(z_b^c, z_a^s, h_a^s)` against `x_a` and `(z_a^c, z_b^s, h_b^s)`
/// against `x_b`; each is time-averaged and the two are summed. The
/// decodes do not update batch-norm running statistics.
pub fn swap_recons(
    fwd: &mut Forward,
    a: &[StepNodes],
    b: &[StepNodes],
    x_a: &[NodeId],
    x_b: &[NodeId],
) -> Result<NodeId, ObjectiveError> {
    if a.len() != b.len() || a.len() != x_a.len() || a.len() != x_b.len() || a.is_empty() {
        return Err(ObjectiveError::Shape(format!(
            "swap needs equal nonzero lengths, got {}, {}, {}, {}",
            a.len(),
            b.len(),
            x_a.len(),
            x_b.len()
        )));
    }
    let track = fwd.track_running_stats;
    fwd.track_running_stats = false;
    let out = swap_inner(fwd, a, b, x_a, x_b);
    fwd.track_running_stats = track;
    out
}

fn swap_inner(
    fwd: &mut Forward,
    a: &[StepNodes],
    b: &[StepNodes],
    x_a: &[NodeId],
    x_b: &[NodeId],
) -> Result<NodeId, ObjectiveError> {
    let mut per_step = Vec::with_capacity(a.len());
    for t in 0..a.len() {
        let g = &mut *fwd.graph;
        // Stack both directions so one decode covers the pair.
        let zc = g.concat_rows(&[b[t].z_content, a[t].z_content])?;
        let zs = g.concat_rows(&[a[t].z_style, b[t].z_style])?;
        let h = g.concat_rows(&[a[t].h_style_prev, b[t].h_style_prev])?;
        let x = g.concat_rows(&[x_a[t], x_b[t]])?;
        let r = fwd.decode(zc, zs, h)?;
        per_step.push(poisson_nll(fwd.graph, x, r)?);
    }
    let g = &mut *fwd.graph;
    let s = g.concat_cols(&per_step)?;
    let m = g.mean(s)?;
    // Mean over the stacked rows is half the sum over the two directions.
    Ok(g.scale(m, 2.0)?)
}

// ── Full objective ───────────────────────────────────────────────────

/// Counts for one training step, one tensor per time step.
///
/// `anchor` and `positive` are `B × N`; `negatives` holds `F × N` windows
/// (an empty vector when `F = 0`). `negative_index[i]` lists the negatives
/// of anchor `i` as rows of the stacked `[anchor; negatives]` table.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub anchor: Vec<Tensor>,
    pub positive: Vec<Tensor>,
    pub negatives: Vec<Tensor>,
    pub negative_index: Vec<Vec<usize>>,
}

impl PairBatch {
    fn check(&self) -> Result<(usize, usize), ObjectiveError> {
        let t = self.anchor.len();
        if t == 0 || self.positive.len() != t || (!self.negatives.is_empty() && self.negatives.len() != t) {
            return Err(ObjectiveError::Shape(
                "anchor, positive and negative windows must share a nonzero length".into(),
            ));
        }
        let b = self.anchor[0].rows();
        for s in 0..t {
            if self.anchor[s].rows() != b || self.positive[s].rows() != b {
                return Err(ObjectiveError::Shape(format!("step {s}: anchor and positive batch sizes differ")));
            }
        }
        let f = self.negatives.first().map_or(0, Tensor::rows);
        Ok((b, f))
    }
}

/// Builds the full objective: one unroll over anchors, positives and fresh
/// negatives stacked along rows.
pub fn total_loss(
    fwd: &mut Forward,
    batch: &PairBatch,
    sampling: StyleSampling<'_>,
    cfg: &LossConfig,
) -> Result<LossNodes, ObjectiveError> {
    let (b, f) = batch.check()?;
    let t_len = batch.anchor.len();
    let mut xs = Vec::with_capacity(t_len);
    for s in 0..t_len {
        let mut parts = vec![fwd.graph.input(batch.anchor[s].clone()), fwd.graph.input(batch.positive[s].clone())];
        if f > 0 {
            parts.push(fwd.graph.input(batch.negatives[s].clone()));
        }
        xs.push(fwd.graph.concat_rows(&parts)?);
    }
    let mut sampling = sampling;
    let steps = fwd.unroll(&xs, &mut sampling)?;

    let g = &mut *fwd.graph;
    let pair_rows = 2 * b;
    let mut recons = Vec::with_capacity(t_len);
    let mut regular = Vec::with_capacity(t_len);
    let mut priors = Vec::with_capacity(t_len);
    for (s, st) in steps.iter().enumerate() {
        let x = g.slice_rows(xs[s], 0, pair_rows)?;
        let r = g.slice_rows(st.rates, 0, pair_rows)?;
        recons.push(poisson_nll(g, x, r).map_err(|e| match e {
            ObjectiveError::Numerics(source) => ObjectiveError::Term { term: "recons", source },
            e => e,
        })?);
        let q = (g.slice_rows(st.posterior_mean, 0, pair_rows)?, g.slice_rows(st.posterior_logvar, 0, pair_rows)?);
        let p = (g.slice_rows(st.prior_mean, 0, pair_rows)?, g.slice_rows(st.prior_logvar, 0, pair_rows)?);
        let kl = term("regular", gaussian_kl_elements(g, q, p))?;
        regular.push(term("regular", g.mean(kl))?);
        priors.push(p);
    }
    // Means over the stacked pair are doubled to sum the two members.
    let recons = term("recons", mean_over_time_doubled(g, &recons))?;
    let regular = term("regular", mean_over_time_doubled(g, &regular))?;
    let prior = term("prior_l2", prior_l2(g, &priors))?;

    let contrast = match cfg.contrast {
        ContrastMode::Off => g.input(Tensor::scalar(0.0)),
        mode => {
            let zc: Vec<NodeId> = steps.iter().map(|s| s.z_content).collect();
            let reps = term("contrast", g.concat_cols(&zc))?;
            let anchor = term("contrast", g.slice_rows(reps, 0, b))?;
            let positive = term("contrast", g.slice_rows(reps, b, b))?;
            if mode == ContrastMode::PositiveOnly {
                term("contrast", positive_only_loss(g, anchor, positive))?
            } else {
                let candidates = if f > 0 {
                    let neg = term("contrast", g.slice_rows(reps, 2 * b, f))?;
                    term("contrast", g.concat_rows(&[anchor, neg]))?
                } else {
                    anchor
                };
                if batch.negative_index.iter().flatten().any(|&i| i >= b + f) {
                    return Err(ObjectiveError::Shape("negative index out of range".into()));
                }
                nt_xent(g, anchor, positive, candidates, &batch.negative_index, cfg.tau).map_err(|e| match e {
                    ObjectiveError::Numerics(source) => ObjectiveError::Term { term: "contrast", source },
                    e => e,
                })?
            }
        }
    };

    let swap = if cfg.swap {
        let a: Vec<StepNodes> = steps.iter().map(|s| slice_step(fwd.graph, s, 0, b)).collect::<Result<_, _>>()?;
        let p: Vec<StepNodes> = steps.iter().map(|s| slice_step(fwd.graph, s, b, b)).collect::<Result<_, _>>()?;
        let xa: Vec<NodeId> = xs.iter().map(|&x| fwd.graph.slice_rows(x, 0, b)).collect::<Result<_, _>>()?;
        let xp: Vec<NodeId> = xs.iter().map(|&x| fwd.graph.slice_rows(x, b, b)).collect::<Result<_, _>>()?;
        swap_recons(fwd, &a, &p, &xa, &xp).map_err(|e| match e {
            ObjectiveError::Numerics(source) => ObjectiveError::Term { term: "swap_recons", source },
            e => e,
        })?
    } else {
        fwd.graph.input(Tensor::scalar(0.0))
    };

    let g = &mut *fwd.graph;
    let total = term("total", weighted_total(g, recons, swap, regular, contrast, prior, cfg))?;
    Ok(LossNodes { recons, regular, contrast, swap_recons: swap, prior_l2: prior, total })
}

fn mean_over_time_doubled(g: &mut Graph, per_step: &[NodeId]) -> Result<NodeId, NumericsError> {
    let s = g.concat_cols(per_step)?;
    let m = g.mean(s)?;
    g.scale(m, 2.0)
}

fn weighted_total(
    g: &mut Graph,
    recons: NodeId,
    swap: NodeId,
    regular: NodeId,
    contrast: NodeId,
    prior: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId, NumericsError> {
    let mut total = g.add(recons, swap)?;
    for (node, w) in [(regular, cfg.beta), (contrast, cfg.gamma), (prior, cfg.prior_l2)] {
        let t = g.scale(node, w)?;
        total = g.add(total, t)?;
    }
    Ok(total)
}

fn slice_step(g: &mut Graph, s: &StepNodes, start: usize, len: usize) -> Result<StepNodes, NumericsError> {
    let mut sl = |n: NodeId| g.slice_rows(n, start, len);
    Ok(StepNodes {
        z_content: sl(s.z_content)?,
        z_style: sl(s.z_style)?,
        posterior_mean: sl(s.posterior_mean)?,
        posterior_logvar: sl(s.posterior_logvar)?,
        prior_mean: sl(s.prior_mean)?,
        prior_logvar: sl(s.prior_logvar)?,
        rates: sl(s.rates)?,
        h_style_prev: sl(s.h_style_prev)?,
        h_content: sl(s.h_content)?,
        h_style: sl(s.h_style)?,
    })
}

// ── Scalar conveniences ──────────────────────────────────────────────

fn scalar_of(g: &Graph, n: NodeId) -> f64 {
    g.value(n).data()[0]
}

/// Poisson negative log-likelihood of one bin, averaged over neurons.
pub fn poisson_nll_value(counts: &[f64], rates: &[f64]) -> Result<f64, ObjectiveError> {
    let mut g = Graph::new();
    let x = g.input(Tensor::row(counts));
    let r = g.input(Tensor::row(rates));
    let n = poisson_nll(&mut g, x, r)?;
    Ok(scalar_of(&g, n))
}

/// KL(q ‖ p) summed over dimensions.
pub fn gaussian_kl_value(q: &GaussianParams, p: &GaussianParams) -> Result<f64, ObjectiveError> {
    let d = q.mean.len();
    if q.log_variance.len() != d || p.mean.len() != d || p.log_variance.len() != d {
        return Err(ObjectiveError::Shape("Gaussian parameter lengths differ".into()));
    }
    let mut g = Graph::new();
    let mut row = |v: &[f64]| g.input(Tensor::row(v));
    let qn = (row(&q.mean), row(&q.log_variance));
    let pn = (row(&p.mean), row(&p.log_variance));
    let n = gaussian_kl(&mut g, qn, pn)?;
    Ok(scalar_of(&g, n))
}

/// NT-Xent for a single anchor.
pub fn nt_xent_value(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64, ObjectiveError> {
    let d = anchor.len();
    if positive.len() != d || negatives.iter().any(|n| n.len() != d) {
        return Err(ObjectiveError::Shape("representation lengths differ".into()));
    }
    let mut g = Graph::new();
    let a = g.input(Tensor::row(anchor));
    let p = g.input(Tensor::row(positive));
    let c = g.input(Tensor::matrix(negatives.len(), d, negatives.concat())?);
    let n = nt_xent(&mut g, a, p, c, &[(0..negatives.len()).collect()], tau)?;
    Ok(scalar_of(&g, n))
}

/// `1 − cos(anchor, positive)`.
pub fn positive_only_value(anchor: &[f64], positive: &[f64]) -> Result<f64, ObjectiveError> {
    if anchor.len() != positive.len() {
        return Err(ObjectiveError::Shape("representation lengths differ".into()));
    }
    let mut g = Graph::new();
    let a = g.input(Tensor::row(anchor));
    let p = g.input(Tensor::row(positive));
    let n = positive_only_loss(&mut g, a, p)?;
    Ok(scalar_of(&g, n))
}

/// Mean of squared prior parameters over a sequence of priors.
pub fn prior_l2_value(priors: &[GaussianParams]) -> Result<f64, ObjectiveError> {
    let mut g = Graph::new();
    let nodes: Vec<(NodeId, NodeId)> =
        priors.iter().map(|p| (g.input(Tensor::row(&p.mean)), g.input(Tensor::row(&p.log_variance)))).collect();
    let n = prior_l2(&mut g, &nodes)?;
    Ok(scalar_of(&g, n))
}
