//! Fitted parameters and interpolation `Y_ij(t) = f_j' W_i B(t)`.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bspline::{BSplineBasis, BasisRow};
use crate::data::StandardizationStats;
use crate::error::{Error, Result};
use crate::optim::FitConfig;

/// Population factors `F` (J x R) and per-subject spline weights `W_i` (R x M).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub basis: BSplineBasis,
    pub factors: DMatrix<f64>,
    pub weights: Vec<DMatrix<f64>>,
}

impl ModelParams {
    pub fn new(basis: BSplineBasis, factors: DMatrix<f64>, weights: Vec<DMatrix<f64>>) -> Result<Self> {
        let params = Self {
            basis,
            factors,
            weights,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn zeros(basis: BSplineBasis, num_subjects: usize, num_series: usize, rank: usize) -> Self {
        let m = basis.num_basis();
        Self {
            basis,
            factors: DMatrix::zeros(num_series, rank),
            weights: vec![DMatrix::zeros(rank, m); num_subjects],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.check_shapes()?;
        let finite = self.factors.iter().all(|v| v.is_finite())
            && self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::InvalidArgument("parameters must be finite".into()));
        }
        Ok(())
    }

    pub(crate) fn check_shapes(&self) -> Result<()> {
        let r = self.rank();
        if r == 0 {
            return Err(Error::ShapeMismatch("rank must be positive".into()));
        }
        let m = self.basis.num_basis();
        for (i, w) in self.weights.iter().enumerate() {
            if w.nrows() != r || w.ncols() != m {
                return Err(Error::ShapeMismatch(format!(
                    "W_{i} is {}x{}, expected {r}x{m}",
                    w.nrows(),
                    w.ncols()
                )));
            }
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.factors.ncols()
    }

    pub fn num_subjects(&self) -> usize {
        self.weights.len()
    }

    pub fn num_series(&self) -> usize {
        self.factors.nrows()
    }

    fn check_indices(&self, subject: usize, series: Option<usize>) -> Result<()> {
        if subject >= self.num_subjects() {
            return Err(Error::Index(format!(
                "subject {subject} (model has {})",
                self.num_subjects()
            )));
        }
        if let Some(j) = series {
            if j >= self.num_series() {
                return Err(Error::Index(format!("series {j} (model has {})", self.num_series())));
            }
        }
        Ok(())
    }

    /// `theta_i(t) = W_i B(t)` for an already evaluated basis row.
    pub fn theta_at_row(&self, subject: usize, row: &BasisRow) -> Vec<f64> {
        let w = &self.weights[subject];
        (0..self.rank())
            .map(|r| {
                row.values
                    .iter()
                    .enumerate()
                    .map(|(k, b)| w[(r, row.start + k)] * b)
                    .sum()
            })
            .collect()
    }

    pub fn predict_at_row(&self, subject: usize, series: usize, row: &BasisRow) -> f64 {
        let theta = self.theta_at_row(subject, row);
        theta
            .iter()
            .enumerate()
            .map(|(r, th)| self.factors[(series, r)] * th)
            .sum()
    }

    pub fn dynamic_factors(&self, subject: usize, t: f64) -> Result<Vec<f64>> {
        self.check_indices(subject, None)?;
        let row = self.basis.eval_row(t)?;
        Ok(self.theta_at_row(subject, &row))
    }

    pub fn predict(&self, subject: usize, series: usize, t: f64) -> Result<f64> {
        self.check_indices(subject, Some(series))?;
        let row = self.basis.eval_row(t)?;
        Ok(self.predict_at_row(subject, series, &row))
    }

    pub fn predict_curve(&self, subject: usize, series: usize, grid: &[f64]) -> Result<Vec<f64>> {
        self.check_indices(subject, Some(series))?;
        grid.iter()
            .map(|&t| Ok(self.predict_at_row(subject, series, &self.basis.eval_row(t)?)))
            .collect()
    }

    /// Predictions for every (subject, series) on a shared grid, laid out as
    /// `out[subject][series][k]`. Each grid point is evaluated in the basis once.
    pub fn predict_grid(&self, grid: &[f64]) -> Result<Vec<Vec<Vec<f64>>>> {
        let rows = grid
            .iter()
            .map(|&t| self.basis.eval_row(t))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..self.num_subjects())
            .map(|i| {
                let thetas: Vec<Vec<f64>> = rows.iter().map(|row| self.theta_at_row(i, row)).collect();
                (0..self.num_series())
                    .map(|j| {
                        thetas
                            .iter()
                            .map(|th| {
                                th.iter()
                                    .enumerate()
                                    .map(|(r, v)| self.factors[(j, r)] * v)
                                    .sum()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect())
    }

    /// `||F||_F^2 + ||W||_F^2`.
    pub fn penalty(&self) -> f64 {
        self.factors.norm_squared() + self.weights.iter().map(|w| w.norm_squared()).sum::<f64>()
    }
}

pub const MODEL_FORMAT: &str = "idlfm-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub degree: usize,
    pub num_basis: usize,
    pub domain_end: f64,
    pub knots: Vec<f64>,
}

/// Self-describing JSON model document. Parameter arrays are flat and
/// row-major: `factors` is J x R, `weights` is I x R x M.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub num_subjects: usize,
    pub num_series: usize,
    pub rank: usize,
    pub basis: BasisSpec,
    pub subject_ids: Vec<String>,
    pub series_ids: Vec<String>,
    pub factors: Vec<f64>,
    pub weights: Vec<f64>,
    pub standardization: Option<StandardizationStats>,
    pub seed: u64,
    pub config: FitConfig,
}

impl ModelFile {
    pub fn new(
        params: &ModelParams,
        subject_ids: Vec<String>,
        series_ids: Vec<String>,
        standardization: Option<StandardizationStats>,
        config: FitConfig,
    ) -> Result<Self> {
        if subject_ids.len() != params.num_subjects() || series_ids.len() != params.num_series() {
            return Err(Error::ShapeMismatch("id lists do not match parameter shapes".into()));
        }
        let (j_count, r) = params.factors.shape();
        let m = params.basis.num_basis();
        let factors = (0..j_count)
            .flat_map(|j| (0..r).map(move |c| (j, c)))
            .map(|idx| params.factors[idx])
            .collect();
        let weights = params
            .weights
            .iter()
            .flat_map(|w| (0..r).flat_map(move |row| (0..m).map(move |col| w[(row, col)])))
            .collect();
        Ok(Self {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            num_subjects: params.num_subjects(),
            num_series: j_count,
            rank: r,
            basis: BasisSpec {
                degree: params.basis.degree(),
                num_basis: m,
                domain_end: params.basis.domain_end(),
                knots: params.basis.knots().to_vec(),
            },
            subject_ids,
            series_ids,
            factors,
            weights,
            standardization,
            seed: config.seed,
            config,
        })
    }

    pub fn params(&self) -> Result<ModelParams> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported model format {} v{}",
                self.format, self.version
            )));
        }
        let basis = BSplineBasis::new(self.basis.domain_end, self.basis.num_basis, self.basis.degree)?;
        if basis.knots() != self.basis.knots.as_slice() {
            return Err(Error::InvalidArgument(
                "stored knots are not the clamped uniform knots of the stored basis".into(),
            ));
        }
        let (i_count, j_count, r, m) = (self.num_subjects, self.num_series, self.rank, self.basis.num_basis);
        if self.factors.len() != j_count * r || self.weights.len() != i_count * r * m {
            return Err(Error::ShapeMismatch("parameter array lengths".into()));
        }
        if self.subject_ids.len() != i_count || self.series_ids.len() != j_count {
            return Err(Error::ShapeMismatch("id list lengths".into()));
        }
        let factors = DMatrix::from_row_slice(j_count, r, &self.factors);
        let weights = self
            .weights
            .chunks(r * m)
            .map(|chunk| DMatrix::from_row_slice(r, m, chunk))
            .collect();
        ModelParams::new(basis, factors, weights)
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(reader: R) -> Result<Self> {
        Ok(serde_json::from_reader(reader)?)
    }
}
