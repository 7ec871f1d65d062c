//! Frozen RealNVP flow used to lift 2-D latents to observation space.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::stream_rng;

/// Two-layer map `tanh(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
struct Mlp {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    input: usize,
    hidden: usize,
    output: usize,
}

impl Mlp {
    fn random(input: usize, hidden: usize, output: usize, out_scale: f64, rng: &mut impl Rng) -> Self {
        let mut draw = |n: usize, sd: f64| -> Vec<f64> {
            (0..n).map(|_| sd * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
        };
        let w1 = draw(input * hidden, 1.0 / (input as f64).sqrt());
        let b1 = draw(hidden, 0.5);
        let w2 = draw(hidden * output, out_scale / (hidden as f64).sqrt());
        let b2 = vec![0.0; output];
        Self { w1, b1, w2, b2, input, hidden, output }
    }

    fn zero(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: vec![0.0; input * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * output],
            b2: vec![0.0; output],
            input,
            hidden,
            output,
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| (self.b1[j] + (0..self.input).map(|i| x[i] * self.w1[i * self.hidden + j]).sum::<f64>()).tanh())
            .collect();
        (0..self.output)
            .map(|k| self.b2[k] + (0..self.hidden).map(|j| h[j] * self.w2[j * self.output + k]).sum::<f64>())
            .collect()
    }
}

/// Affine coupling: one half conditions a scale and shift of the other.
#[derive(Clone, Debug, PartialEq)]
struct Coupling {
    /// When true the first half is transformed, conditioned on the second.
    flip: bool,
    scale: Mlp,
    shift: Mlp,
}

/// Stack of affine couplings with alternating halves over a `dim`-wide input.
#[derive(Clone, Debug, PartialEq)]
pub struct RealNvp {
    dim: usize,
    layers: Vec<Coupling>,
}

impl RealNvp {
    /// Random frozen flow. Log-scales pass through `tanh` so each coupling
    /// stretches by at most `e`.
    pub fn random(dim: usize, depth: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0);
        let half = dim / 2;
        let layers = (0..depth)
            .map(|k| {
                let flip = k % 2 == 1;
                let (cond, out) = if flip { (dim - half, half) } else { (half, dim - half) };
                Coupling {
                    flip,
                    scale: Mlp::random(cond, hidden, out, 0.5, &mut rng),
                    shift: Mlp::random(cond, hidden, out, 2.0, &mut rng),
                }
            })
            .collect();
        Self { dim, layers }
    }

    /// A flow whose scale and shift maps are identically zero.
    pub fn identity(dim: usize, depth: usize, hidden: usize) -> Self {
        let half = dim / 2;
        let layers = (0..depth)
            .map(|k| {
                let flip = k % 2 == 1;
                let (cond, out) = if flip { (dim - half, half) } else { (half, dim - half) };
                Coupling { flip, scale: Mlp::zero(cond, hidden, out), shift: Mlp::zero(cond, hidden, out) }
            })
            .collect();
        Self { dim, layers }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn halves(&self, flip: bool) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let half = self.dim / 2;
        if flip {
            (half..self.dim, 0..half)
        } else {
            (0..half, half..self.dim)
        }
    }

    /// Zero-pads `z` to the flow width and applies every coupling.
    pub fn forward(&self, z: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        v[..z.len()].copy_from_slice(z);
        for layer in &self.layers {
            let (cond, out) = self.halves(layer.flip);
            let c = v[cond].to_vec();
            let s = layer.scale.forward(&c);
            let t = layer.shift.forward(&c);
            for (k, i) in out.enumerate() {
                v[i] = v[i] * s[k].tanh().exp() + t[k];
            }
        }
        v
    }

    /// Exact inverse of [`RealNvp::forward`] on the full-width vector.
    pub fn inverse(&self, y: &[f64]) -> Vec<f64> {
        let mut v = y.to_vec();
        for layer in self.layers.iter().rev() {
            let (cond, out) = self.halves(layer.flip);
            let c = v[cond].to_vec();
            let s = layer.scale.forward(&c);
            let t = layer.shift.forward(&c);
            for (k, i) in out.enumerate() {
                v[i] = (v[i] - t[k]) * (-s[k].tanh()).exp();
            }
        }
        v
    }
}
