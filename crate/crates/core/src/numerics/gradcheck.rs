//! Central-difference verification of graph adjoints.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::NumericsError;

/// Worst coordinate found by [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Max relative error per parameter, in input order.
    pub per_param: Vec<f64>,
    /// `(parameter, flat coordinate)` of the worst entry.
    pub worst: Option<(usize, usize)>,
}

/// Relative error used throughout gradient verification.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.input(p.clone())).collect();
    let root = f(&mut g, &ids)?;
    Ok(g.value(root).data()[0])
}

/// Compares reverse-mode adjoints of `f` at `params` against central
/// differences with step `eps`.
///
/// `f` receives a fresh graph and one node per parameter and must return a
/// scalar node. It is invoked `1 + 2·Σ|params|` times and must be deterministic.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(NumericsError::InvalidArgument(format!("gradcheck step must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &ids)?;
    g.backward(root)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, per_param: vec![0.0; params.len()], worst: None };
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = g.grad(*id).cloned().unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
        for c in 0..params[pi].len() {
            let orig = params[pi].data()[c];
            probe[pi].data_mut()[c] = orig + eps;
            let up = evaluate(&f, &probe)?;
            probe[pi].data_mut()[c] = orig - eps;
            let down = evaluate(&f, &probe)?;
            probe[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[c];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(NumericsError::NonFiniteGradient { param: pi, coord: c, analytic: a, numeric });
            }
            let err = relative_error(a, numeric);
            if err > report.per_param[pi] {
                report.per_param[pi] = err;
            }
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, c));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let r = grad_check(
            |g, p| {
                let sq = g.square(p[0])?;
                g.sum(sq)
            },
            &[Tensor::scalar(1.0)],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
    }

    #[test]
    fn constant_has_zero_error() {
        let r = grad_check(
            |g, p| {
                let z = g.scale(p[0], 0.0)?;
                let s = g.sum(z)?;
                g.add_scalar(s, 3.0)
            },
            &[Tensor::row(&[0.3, -1.2])],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(grad_check(|g, p| g.sum(p[0]), &[Tensor::scalar(1.0)], 0.0).is_err());
    }

    #[test]
    fn non_finite_names_coordinate() {
        // sqrt at 0 has an infinite derivative.
        let err = grad_check(
            |g, p| {
                let s = g.sqrt(p[0])?;
                g.sum(s)
            },
            &[Tensor::row(&[1.0, 0.0])],
            1e-7,
        );
        match err {
            Err(NumericsError::NonFiniteGradient { param: 0, coord: 1, .. }) | Err(NumericsError::NonFinite { .. }) => {
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
