//! Parameterized building blocks, addressed by index into a `ParamStore`.

use rand::Rng;

use crate::numerics::{BatchNormMode, Graph, NodeId, NumericsError, Tensor};

use super::params::ParamStore;
use super::CellKind;

pub(crate) const BN_MOMENTUM: f64 = 0.1;

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Affine map `x · W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.push(format!("{name}.weight"), uniform(rng, &[fan_in, fan_out], bound));
        let b = store.push(format!("{name}.bias"), Tensor::zeros(&[1, fan_out]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &[NodeId], x: NodeId) -> Result<NodeId, NumericsError> {
        let y = g.matmul(x, p[self.w])?;
        g.add_row(y, p[self.b])
    }
}

/// Batch normalization with learnable scale/shift and running statistics.
#[derive(Clone, Debug)]
pub(crate) struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, buffers: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.push(format!("{name}.gamma"), Tensor::filled(&[1, width], 1.0)),
            beta: store.push(format!("{name}.beta"), Tensor::zeros(&[1, width])),
            running_mean: buffers.push(format!("{name}.running_mean"), Tensor::zeros(&[1, width])),
            running_var: buffers.push(format!("{name}.running_var"), Tensor::filled(&[1, width], 1.0)),
        }
    }
}

/// Linear → batch normalization → ReLU.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub linear: Linear,
    pub bn: BatchNorm,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        buffers: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            linear: Linear::new(store, &format!("{name}.linear"), fan_in, fan_out, rng),
            bn: BatchNorm::new(store, buffers, &format!("{name}.bn"), fan_out),
        }
    }
}

/// Recurrent cell state: hidden vector plus the LSTM memory cell.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub h: NodeId,
    pub c: Option<NodeId>,
}

/// GRU, vanilla tanh RNN, or LSTM. Gates are packed along columns.
#[derive(Clone, Debug)]
pub(crate) struct Cell {
    pub kind: CellKind,
    pub hidden: usize,
    pub w_ih: usize,
    pub w_hh: usize,
    pub b_ih: usize,
    pub b_hh: usize,
}

impl Cell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: CellKind,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let gates = match kind {
            CellKind::Gru => 3,
            CellKind::Rnn => 1,
            CellKind::Lstm => 4,
        };
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.push(format!("{name}.w_ih"), uniform(rng, &[input, gates * hidden], bound));
        let w_hh = store.push(format!("{name}.w_hh"), uniform(rng, &[hidden, gates * hidden], bound));
        let b_ih = store.push(format!("{name}.b_ih"), Tensor::zeros(&[1, gates * hidden]));
        let b_hh = store.push(format!("{name}.b_hh"), Tensor::zeros(&[1, gates * hidden]));
        Self { kind, hidden, w_ih, w_hh, b_ih, b_hh }
    }

    pub fn step(&self, g: &mut Graph, p: &[NodeId], x: NodeId, state: CellState) -> Result<CellState, NumericsError> {
        let hdim = self.hidden;
        let gi = g.matmul(x, p[self.w_ih])?;
        let gi = g.add_row(gi, p[self.b_ih])?;
        let gh = g.matmul(state.h, p[self.w_hh])?;
        let gh = g.add_row(gh, p[self.b_hh])?;
        match self.kind {
            CellKind::Rnn => {
                let pre = g.add(gi, gh)?;
                Ok(CellState { h: g.tanh(pre)?, c: None })
            }
            CellKind::Gru => {
                // Gate order: reset, update, candidate.
                let (ir, hr) = (g.slice_cols(gi, 0, hdim)?, g.slice_cols(gh, 0, hdim)?);
                let (iz, hz) = (g.slice_cols(gi, hdim, hdim)?, g.slice_cols(gh, hdim, hdim)?);
                let (inn, hn) = (g.slice_cols(gi, 2 * hdim, hdim)?, g.slice_cols(gh, 2 * hdim, hdim)?);
                let r = g.add(ir, hr)?;
                let r = g.sigmoid(r)?;
                let z = g.add(iz, hz)?;
                let z = g.sigmoid(z)?;
                let rn = g.mul(r, hn)?;
                let n = g.add(inn, rn)?;
                let n = g.tanh(n)?;
                // h' = (1 - z)·n + z·h = n + z·(h - n)
                let d = g.sub(state.h, n)?;
                let zd = g.mul(z, d)?;
                Ok(CellState { h: g.add(n, zd)?, c: None })
            }
            CellKind::Lstm => {
                let pre = g.add(gi, gh)?;
                let i = g.slice_cols(pre, 0, hdim)?;
                let i = g.sigmoid(i)?;
                let f = g.slice_cols(pre, hdim, hdim)?;
                let f = g.sigmoid(f)?;
                let cand = g.slice_cols(pre, 2 * hdim, hdim)?;
                let cand = g.tanh(cand)?;
                let o = g.slice_cols(pre, 3 * hdim, hdim)?;
                let o = g.sigmoid(o)?;
                let c_prev = state.c.expect("LSTM state carries a memory cell");
                let fc = g.mul(f, c_prev)?;
                let ic = g.mul(i, cand)?;
                let c = g.add(fc, ic)?;
                let tc = g.tanh(c)?;
                Ok(CellState { h: g.mul(o, tc)?, c: Some(c) })
            }
        }
    }
}

/// Batch-norm mode for one call, resolved against the buffer table.
pub(crate) fn bn_mode<'a>(bn: &BatchNorm, buffers: &'a ParamStore, train: bool) -> BatchNormMode<'a> {
    if train {
        BatchNormMode::Train
    } else {
        BatchNormMode::Eval { mean: buffers.get(bn.running_mean).data(), var: buffers.get(bn.running_var).data() }
    }
}
