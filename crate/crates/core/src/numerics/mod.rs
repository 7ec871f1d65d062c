//! Tensor arithmetic, reverse-mode differentiation and gradient checking.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub(crate) use graph::softplus;
pub use graph::{BatchNormMode, BatchStats, Graph, NodeId, BATCHNORM_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("non-finite gradient at parameter {param}, coordinate {coord} (analytic {analytic}, numeric {numeric})")]
    NonFiniteGradient { param: usize, coord: usize, analytic: f64, numeric: f64 },
    #[error("{0}")]
    InvalidArgument(String),
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    type Builder = fn(&mut Graph, &[NodeId]) -> Result<NodeId, NumericsError>;

    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`. Unlike
    /// the relative error this stays meaningful where a gradient coordinate is 0.
    fn scaled_grad_error(f: Builder, params: &[Tensor], eps: f64) -> f64 {
        let eval = |ps: &[Tensor]| {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = ps.iter().map(|p| g.input(p.clone())).collect();
            let root = f(&mut g, &ids).unwrap();
            g.value(root).data()[0]
        };
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
        let root = f(&mut g, &ids).unwrap();
        g.backward(root).unwrap();
        let mut probe = params.to_vec();
        let mut worst = 0.0f64;
        for (pi, id) in ids.iter().enumerate() {
            let analytic = g.grad(*id).cloned().unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
            for c in 0..params[pi].len() {
                let orig = params[pi].data()[c];
                probe[pi].data_mut()[c] = orig + eps;
                let up = eval(&probe);
                probe[pi].data_mut()[c] = orig - eps;
                let down = eval(&probe);
                probe[pi].data_mut()[c] = orig;
                let (a, n) = (analytic.data()[c], (up - down) / (2.0 * eps));
                worst = worst.max((a - n).abs() / 1f64.max(a.abs()).max(n.abs()));
            }
        }
        worst
    }

    fn finish(g: &mut Graph, y: NodeId, w: NodeId) -> Result<NodeId, NumericsError> {
        // Weighted sum so every output coordinate carries a distinct adjoint.
        let p = g.mul(y, w)?;
        g.sum(p)
    }

    fn unary_cases() -> Vec<(&'static str, Builder)> {
        vec![
            ("exp", |g, p| {
                let y = g.exp(p[0])?;
                finish(g, y, p[1])
            }),
            ("log", |g, p| {
                let s = g.square(p[0])?;
                let s = g.add_scalar(s, 0.5)?;
                let y = g.log(s)?;
                finish(g, y, p[1])
            }),
            ("sqrt", |g, p| {
                let s = g.square(p[0])?;
                let s = g.add_scalar(s, 0.5)?;
                let y = g.sqrt(s)?;
                finish(g, y, p[1])
            }),
            ("square", |g, p| {
                let y = g.square(p[0])?;
                finish(g, y, p[1])
            }),
            ("sigmoid", |g, p| {
                let y = g.sigmoid(p[0])?;
                finish(g, y, p[1])
            }),
            ("tanh", |g, p| {
                let y = g.tanh(p[0])?;
                finish(g, y, p[1])
            }),
            ("relu", |g, p| {
                let y = g.relu(p[0])?;
                finish(g, y, p[1])
            }),
            ("softplus", |g, p| {
                let y = g.softplus(p[0])?;
                finish(g, y, p[1])
            }),
            ("neg", |g, p| {
                let y = g.neg(p[0])?;
                finish(g, y, p[1])
            }),
            ("mul", |g, p| {
                let y = g.mul(p[0], p[0])?;
                finish(g, y, p[1])
            }),
            ("div", |g, p| {
                let d = g.square(p[1])?;
                let d = g.add_scalar(d, 1.0)?;
                let y = g.div(p[0], d)?;
                finish(g, y, p[1])
            }),
            ("sub", |g, p| {
                let y = g.sub(p[0], p[1])?;
                finish(g, y, p[1])
            }),
            ("clamp", |g, p| {
                let y = g.clamp(p[0], -0.9, 0.9)?;
                finish(g, y, p[1])
            }),
            ("row_normalize", |g, p| {
                let y = g.row_normalize(p[0])?;
                finish(g, y, p[1])
            }),
            ("log_sum_exp", |g, p| {
                let m = g.mul(p[0], p[1])?;
                let y = g.log_sum_exp_cols(m)?;
                let s = g.square(y)?;
                g.sum(s)
            }),
            ("sum_cols", |g, p| {
                let m = g.mul(p[0], p[1])?;
                let y = g.sum_cols(m)?;
                let s = g.square(y)?;
                g.sum(s)
            }),
            ("mean", |g, p| {
                let m = g.mul(p[0], p[1])?;
                let y = g.mean(m)?;
                g.square(y)
            }),
            ("slice_concat", |g, p| {
                let c = g.concat_cols(&[p[0], p[1]])?;
                let r = g.concat_rows(&[c, c])?;
                let cols = g.value(p[0]).cols();
                let s = g.slice_cols(r, 1, cols)?;
                let rows = g.value(p[0]).rows();
                let s = g.slice_rows(s, 1, rows)?;
                finish(g, s, p[1])
            }),
            ("gather", |g, p| {
                let (rows, cols) = (g.value(p[0]).rows(), g.value(p[0]).cols());
                let idx: Vec<usize> = (0..rows * 2).map(|i| (i * 7 + 3) % cols).collect();
                let y = g.gather_cols(p[0], idx, 2)?;
                let s = g.square(y)?;
                let w = g.slice_cols(p[1], 0, 1)?;
                let w = g.concat_cols(&[w, w])?;
                finish(g, s, w)
            }),
            ("matmul", |g, p| {
                let y = g.matmul_t(p[0], p[1])?;
                let z = g.matmul(y, p[1])?;
                let s = g.square(z)?;
                g.sum(s)
            }),
            ("batchnorm", |g, p| {
                let gamma = g.slice_rows(p[1], 0, 1)?;
                let beta = g.scale(gamma, -0.5)?;
                let (y, _) = g.batchnorm(p[0], gamma, beta, BatchNormMode::Train)?;
                finish(g, y, p[1])
            }),
            ("row_ops", |g, p| {
                let row = g.slice_rows(p[1], 0, 1)?;
                let a = g.add_row(p[0], row)?;
                let m = g.mul_row(a, row)?;
                finish(g, m, p[1])
            }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn primitives_match_finite_differences(
            rows in 3usize..5,
            cols in 2usize..5,
            seed in proptest::collection::vec(-1.5f64..1.5, 64),
        ) {
            let n = rows * cols;
            // Keep values off the ReLU/clamp kinks.
            let nudge = |v: f64| if v.abs() < 0.05 { v + 0.1 } else if (v.abs() - 0.9).abs() < 0.05 { v * 1.2 } else { v };
            // Distinct offsets keep shrunk inputs away from constant columns and
            // from rows of `x` parallel to rows of `w`, where the checks degenerate.
            let spread = |vals: &[f64]| -> Vec<f64> {
                vals.iter().enumerate().map(|(i, &v)| nudge(v + 0.05 * ((i + 1) as f64).sqrt())).collect()
            };
            let x = Tensor::matrix(rows, cols, spread(&seed[..n])).unwrap();
            let w = Tensor::matrix(rows, cols, spread(&seed[32..32 + n])).unwrap();
            for (name, f) in unary_cases() {
                let err = scaled_grad_error(f, &[x.clone(), w.clone()], 1e-6);
                prop_assert!(err < 1e-6, "{} scaled err {}", name, err);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn batchnorm_output_standardized(
            rows in 2usize..8,
            data in proptest::collection::vec(-5.0f64..5.0, 24),
        ) {
            let cols = 3;
            let x = Tensor::matrix(rows, cols, data[..rows * cols].to_vec()).unwrap();
            let mut g = Graph::new();
            let xi = g.input(x);
            let gamma = g.input(Tensor::row(&[1.0; 3]));
            let beta = g.input(Tensor::row(&[0.0; 3]));
            let (y, stats) = g.batchnorm(xi, gamma, beta, BatchNormMode::Train).unwrap();
            let stats = stats.unwrap();
            let v = g.value(y);
            for c in 0..cols {
                let col: Vec<f64> = (0..rows).map(|r| v.get(r, c)).collect();
                let mean = col.iter().sum::<f64>() / rows as f64;
                let var = col.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / rows as f64;
                prop_assert!(mean.abs() < 1e-9);
                // variance is σ²/(σ²+ε)
                let expected = stats.var[c] / (stats.var[c] + BATCHNORM_EPS);
                prop_assert!((var - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn backward_is_bit_reproducible() {
        let build = || {
            let mut g = Graph::new();
            let a = g.param(Tensor::matrix(2, 3, vec![0.1, -0.4, 0.3, 0.9, -0.2, 0.5]).unwrap());
            let b = g.param(Tensor::matrix(3, 2, vec![0.7, 0.2, -0.6, 0.1, 0.3, -0.8]).unwrap());
            let c = g.matmul(a, b).unwrap();
            let t = g.tanh(c).unwrap();
            let l = g.log_sum_exp_cols(t).unwrap();
            let s = g.sum(l).unwrap();
            g.backward(s).unwrap();
            (g.grad(a).unwrap().clone(), g.grad(b).unwrap().clone())
        };
        let (a1, b1) = build();
        let (a2, b2) = build();
        assert!(a1.data().iter().zip(a2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b1.data().iter().zip(b2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
