//! Clamped uniform B-spline bases on `[0, T]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A clamped B-spline basis with evenly spaced interior knots.
///
/// The knot vector has `num_basis + degree + 1` entries: `degree + 1` copies
/// of `0`, the `num_basis - degree - 1` interior knots `k * T / (a + 1)`, and
/// `degree + 1` copies of `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    degree: usize,
    num_basis: usize,
    domain_end: f64,
    knots: Vec<f64>,
}

/// The nonzero block of a basis evaluation: `values[k]` is `B_{start + k}(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisRow {
    pub start: usize,
    pub values: Vec<f64>,
}

impl BasisRow {
    pub fn dot(&self, coefficients: &[f64]) -> f64 {
        self.values
            .iter()
            .zip(&coefficients[self.start..])
            .map(|(b, c)| b * c)
            .sum()
    }

    pub fn to_dense(&self, num_basis: usize) -> Vec<f64> {
        let mut dense = vec![0.0; num_basis];
        dense[self.start..self.start + self.values.len()].copy_from_slice(&self.values);
        dense
    }
}

impl BSplineBasis {
    pub fn new(domain_end: f64, num_basis: usize, degree: usize) -> Result<Self> {
        if !(domain_end.is_finite() && domain_end > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "domain end must be positive and finite, got {domain_end}"
            )));
        }
        if num_basis < degree + 1 {
            return Err(Error::InvalidArgument(format!(
                "need at least degree + 1 = {} basis functions, got {num_basis}",
                degree + 1
            )));
        }
        let interior = num_basis - degree - 1;
        let spacing = domain_end / (interior + 1) as f64;
        let mut knots = Vec::with_capacity(num_basis + degree + 1);
        knots.extend(std::iter::repeat(0.0).take(degree + 1));
        knots.extend((1..=interior).map(|k| k as f64 * spacing));
        knots.extend(std::iter::repeat(domain_end).take(degree + 1));
        Ok(Self {
            degree,
            num_basis,
            domain_end,
            knots,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn domain_end(&self) -> f64 {
        self.domain_end
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.knots[self.degree + 1..self.num_basis]
    }

    pub fn contains(&self, t: f64) -> bool {
        (0.0..=self.domain_end).contains(&t)
    }

    fn check(&self, t: f64) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(Error::Domain {
                t,
                end: self.domain_end,
            })
        }
    }

    /// Index `s` of the knot span with `knots[s] <= t < knots[s + 1]`,
    /// clamped to `[degree, num_basis - 1]` so that `t = T` falls in the last
    /// non-empty span.
    fn span(&self, t: f64) -> usize {
        let last = self.num_basis - 1;
        if t >= self.domain_end {
            return last;
        }
        let idx = self.knots.partition_point(|&k| k <= t);
        idx.saturating_sub(1).clamp(self.degree, last)
    }

    /// Writes the `degree + 1` possibly-nonzero basis values at `t` into
    /// `out` and returns the index of the first one.
    ///
    /// Triangular Cox-de Boor recurrence; `out.len()` must be `degree + 1`.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<usize> {
        self.check(t)?;
        let p = self.degree;
        debug_assert_eq!(out.len(), p + 1);
        let s = self.span(t);
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        out[0] = 1.0;
        for j in 1..=p {
            left[j] = t - self.knots[s + 1 - j];
            right[j] = self.knots[s + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = out[r] / (right[r + 1] + left[j - r]);
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
        Ok(s - p)
    }

    pub fn eval_row(&self, t: f64) -> Result<BasisRow> {
        let mut values = vec![0.0; self.degree + 1];
        let start = self.eval_into(t, &mut values)?;
        Ok(BasisRow { start, values })
    }

    /// All `num_basis` values `(B_1(t), ..., B_M(t))`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        Ok(self.eval_row(t)?.to_dense(self.num_basis))
    }
}
