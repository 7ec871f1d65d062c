//! Least-squares reconstruction score.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

use super::EvalError;

/// Ridge added to the normal equations when the design is rank-deficient.
pub const RIDGE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionScore {
    /// Mean of `per_dimension`.
    pub r_squared: f64,
    pub per_dimension: Vec<f64>,
    pub n_points: usize,
    /// True when the ridge fallback was used.
    pub ridge: bool,
}

/// Affine map `y ≈ x·coef + intercept`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearFit {
    pub coef: DMatrix<f64>,
    pub intercept: DVector<f64>,
    pub ridge: bool,
}

impl LinearFit {
    pub fn predict(&self, x: &Tensor) -> DMatrix<f64> {
        let mut p = to_matrix(x) * &self.coef;
        for mut row in p.row_iter_mut() {
            row += self.intercept.transpose();
        }
        p
    }
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.mean()))
}

/// Ordinary least squares with intercept. Falls back to ridge with
/// [`RIDGE_EPS`] when the centred Gram matrix is not numerically
/// positive definite.
pub fn fit_affine(x: &Tensor, y: &Tensor) -> Result<LinearFit, EvalError> {
    if x.rows() != y.rows() {
        return Err(EvalError::Shape(format!("{} latent points but {} truth points", x.rows(), y.rows())));
    }
    if x.rows() <= x.cols() {
        return Err(EvalError::Shape(format!(
            "{} points cannot determine an affine map from {} dims",
            x.rows(),
            x.cols()
        )));
    }
    let (xm, ym) = (to_matrix(x), to_matrix(y));
    let (mx, my) = (column_means(&xm), column_means(&ym));
    let mut xc = xm;
    for mut row in xc.row_iter_mut() {
        row -= mx.transpose();
    }
    let mut yc = ym;
    for mut row in yc.row_iter_mut() {
        row -= my.transpose();
    }
    let gram = xc.transpose() * &xc;
    let rhs = xc.transpose() * &yc;
    let scale = gram.diagonal().max().max(f64::MIN_POSITIVE);
    let well_posed = gram.clone().cholesky().filter(|c| c.l().diagonal().iter().all(|&d| d * d > 1e-12 * scale));
    let (chol, ridge) = match well_posed {
        Some(c) => (c, false),
        None => {
            log::warn!("rank-deficient design; using ridge {RIDGE_EPS}");
            let n = gram.nrows();
            let reg = gram + DMatrix::identity(n, n) * RIDGE_EPS;
            (reg.cholesky().ok_or_else(|| EvalError::Shape("design not finite".into()))?, true)
        }
    };
    let coef = chol.solve(&rhs);
    let intercept = my - coef.transpose() * mx;
    Ok(LinearFit { coef, intercept, ridge })
}

/// `1 − SS_res / SS_tot` per column of `y`.
pub fn r_squared(y: &Tensor, pred: &DMatrix<f64>) -> Result<Vec<f64>, EvalError> {
    let ym = to_matrix(y);
    let means = column_means(&ym);
    (0..ym.ncols())
        .map(|j| {
            let tot: f64 = ym.column(j).iter().map(|v| (v - means[j]).powi(2)).sum();
            if tot == 0.0 {
                return Err(EvalError::Shape(format!("truth dimension {j} is constant")));
            }
            let res: f64 = ym.column(j).iter().zip(pred.column(j).iter()).map(|(a, b)| (a - b).powi(2)).sum();
            Ok(1.0 - res / tot)
        })
        .collect()
}

fn score(per_dimension: Vec<f64>, n_points: usize, ridge: bool) -> ReconstructionScore {
    let r_squared = per_dimension.iter().sum::<f64>() / per_dimension.len() as f64;
    ReconstructionScore { r_squared, per_dimension, n_points, ridge }
}

/// Fits latents → truth and scores on the same points.
pub fn reconstruction_score(latents: &Tensor, truth: &Tensor) -> Result<ReconstructionScore, EvalError> {
    let fit = fit_affine(latents, truth)?;
    let per = r_squared(truth, &fit.predict(latents))?;
    Ok(score(per, latents.rows(), fit.ridge))
}

/// Fits on one set of points and scores on another.
pub fn reconstruction_score_held_out(
    fit_latents: &Tensor,
    fit_truth: &Tensor,
    latents: &Tensor,
    truth: &Tensor,
) -> Result<ReconstructionScore, EvalError> {
    let fit = fit_affine(fit_latents, fit_truth)?;
    if latents.cols() != fit_latents.cols() || truth.cols() != fit_truth.cols() || latents.rows() != truth.rows() {
        return Err(EvalError::Shape("held-out points do not match the fitted shapes".into()));
    }
    let per = r_squared(truth, &fit.predict(latents))?;
    Ok(score(per, latents.rows(), fit.ridge))
}
