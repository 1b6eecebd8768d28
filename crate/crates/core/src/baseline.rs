//! Per-series penalized B-spline interpolation, used as the smoothing-spline
//! comparator. Each (subject, series) is fitted on its own observations only.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bspline::BSplineBasis;
use crate::error::{Error, Result};

/// Candidate ridge penalties tried by [`fit_spline_tuned`].
pub const DEFAULT_SPLINE_LAMBDAS: [f64; 7] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0];

#[derive(Debug, Clone, PartialEq)]
pub struct SplineFit {
    pub basis: BSplineBasis,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
}

fn design(points: &[(f64, f64)], basis: &BSplineBasis) -> Result<DMatrix<f64>> {
    let m = basis.num_basis();
    let mut g = DMatrix::zeros(points.len(), m);
    for (row, &(t, _)) in points.iter().enumerate() {
        let b = basis.eval_row(t)?;
        for (k, v) in b.values.iter().enumerate() {
            g[(row, b.start + k)] = *v;
        }
    }
    Ok(g)
}

/// Minimizes `sum_k (y_k - c' B(t_k))^2 + lambda * ||c||^2` through the
/// normal equations `(G'G + lambda I) c = G'y`.
pub fn fit_spline(points: &[(f64, f64)], basis: &BSplineBasis, lambda: f64) -> Result<SplineFit> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "spline fit needs at least 2 points, got {}",
            points.len()
        )));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
    }
    let g = design(points, basis)?;
    let y = DVector::from_iterator(points.len(), points.iter().map(|p| p.1));
    let mut gram = g.tr_mul(&g);
    for d in 0..gram.nrows() {
        gram[(d, d)] += lambda;
    }
    let rhs = g.tr_mul(&y);
    let coefficients = gram.cholesky().ok_or(Error::Singular)?.solve(&rhs);
    if coefficients.iter().any(|c| !c.is_finite()) {
        return Err(Error::Singular);
    }
    Ok(SplineFit {
        basis: basis.clone(),
        coefficients: coefficients.as_slice().to_vec(),
        lambda,
    })
}

pub fn predict_spline(fit: &SplineFit, t: f64) -> Result<f64> {
    Ok(fit.basis.eval_row(t)?.dot(&fit.coefficients))
}

/// Chooses the ridge penalty among `lambdas` on a random hold-out of
/// `validation_fraction` of the points, then refits on all points.
/// Ties go to the larger penalty.
pub fn fit_spline_tuned(
    points: &[(f64, f64)],
    basis: &BSplineBasis,
    lambdas: &[f64],
    validation_fraction: f64,
    seed: u64,
) -> Result<SplineFit> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("no candidate penalties".into()));
    }
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction must lie in (0, 1), got {validation_fraction}"
        )));
    }
    let n_val = (validation_fraction * points.len() as f64).floor() as usize;
    if n_val == 0 || points.len() - n_val < 2 {
        // too few points to hold any out
        let lambda = lambdas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        return fit_spline(points, basis, lambda);
    }
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val_idx, fit_idx) = idx.split_at(n_val);
    let fit_points: Vec<_> = fit_idx.iter().map(|&k| points[k]).collect();

    let mut best: Option<(f64, f64)> = None;
    for &lambda in lambdas {
        let score = match fit_spline(&fit_points, basis, lambda) {
            Ok(fit) => {
                let mut sse = 0.0;
                for &k in val_idx {
                    let (t, y) = points[k];
                    sse += (y - predict_spline(&fit, t)?).powi(2);
                }
                sse / n_val as f64
            }
            Err(Error::Singular) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        let better = match best {
            None => true,
            Some((b_score, b_lambda)) => {
                score < b_score - 1e-12 || ((score - b_score).abs() <= 1e-12 && lambda > b_lambda)
            }
        };
        if better {
            best = Some((score, lambda));
        }
    }
    let (_, lambda) = best.expect("non-empty candidate list");
    fit_spline(points, basis, lambda)
}
