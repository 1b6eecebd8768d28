//! Penalized squared loss, its block gradients and alternating gradient
//! descent.
//!
//! The objective is the unnormalized sum
//!
//! ```text
//! L(F, W) = sum_i sum_j sum_{t in T_ij} (Y_ij(t) - f_j' W_i B(t))^2
//!           + lambda * (||F||_F^2 + ||W||_F^2)
//! ```
//!
//! and each iteration moves `F` and every `W_i` along their negative partial
//! gradients, all evaluated at the previous iterate.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bspline::BSplineBasis;
use crate::data::ObservationPanel;
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// A loss more than this many times the previous one aborts the fit.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub rank: usize,
    pub lambda: f64,
    pub step_size: f64,
    pub stop_eps: f64,
    pub max_iters: usize,
    pub num_basis: usize,
    pub degree: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            rank: 3,
            lambda: 0.1,
            step_size: 1e-4,
            stop_eps: 1e-6,
            max_iters: 5000,
            num_basis: 60,
            degree: 3,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.rank == 0 {
            return bad("rank must be positive".into());
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return bad(format!("step size must be positive, got {}", self.step_size));
        }
        if !(self.stop_eps.is_finite() && self.stop_eps > 0.0) {
            return bad(format!("stopping tolerance must be positive, got {}", self.stop_eps));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return bad(format!("init scale must be positive, got {}", self.init_scale));
        }
        if self.num_basis < self.degree + 1 {
            return bad(format!(
                "num_basis {} is smaller than degree + 1 = {}",
                self.num_basis,
                self.degree + 1
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    /// `L(0), L(1), ...`: the loss at the initial point and after each sweep.
    pub loss_trace: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    pub final_loss: f64,
    pub wall_time: Duration,
}

/// Loss and gradients at one parameter point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    /// The squared-error part of the loss, without the penalty.
    pub data_loss: f64,
    pub grad_f: DMatrix<f64>,
    pub grad_w: Vec<DMatrix<f64>>,
}

struct Cell {
    starts: Vec<usize>,
    /// `degree + 1` basis values per observation.
    values: Vec<f64>,
    y: Vec<f64>,
}

/// Sufficient statistics of one (subject, series) cell restricted to the
/// basis functions its observations touch: `yy = sum y^2`, `h = sum y B(t)`
/// and the banded Gram matrix `G = sum B(t) B(t)'`.
struct Moments {
    lo: usize,
    yy: f64,
    h: Vec<f64>,
    /// `band[k * (degree + 1) + o] = G[lo + k][lo + k + o]`.
    band: Vec<f64>,
}

impl Moments {
    fn new(cell: &Cell, width: usize) -> Option<Self> {
        let lo = *cell.starts.iter().min()?;
        let hi = cell.starts.iter().max()? + width;
        let n = hi - lo;
        let mut m = Moments {
            lo,
            yy: 0.0,
            h: vec![0.0; n],
            band: vec![0.0; n * width],
        };
        for (k, (&start, &y)) in cell.starts.iter().zip(&cell.y).enumerate() {
            let b = &cell.values[k * width..(k + 1) * width];
            m.yy += y * y;
            for (a, &ba) in b.iter().enumerate() {
                let row = start - lo + a;
                m.h[row] += y * ba;
                for (o, &bb) in b[a..].iter().enumerate() {
                    m.band[row * width + o] += ba * bb;
                }
            }
        }
        Some(m)
    }
}

/// The panel with every observation's basis row evaluated once.
pub struct Objective {
    num_subjects: usize,
    num_series: usize,
    num_basis: usize,
    width: usize,
    /// Row-major over (subject, series).
    cells: Vec<Cell>,
    moments: Vec<Option<Moments>>,
}

impl Objective {
    pub fn new(panel: &ObservationPanel, basis: &BSplineBasis) -> Result<Self> {
        let width = basis.degree() + 1;
        let mut cells = Vec::with_capacity(panel.num_subjects() * panel.num_series());
        let mut buf = vec![0.0; width];
        for i in 0..panel.num_subjects() {
            for j in 0..panel.num_series() {
                let obs = panel.cell(i, j);
                let mut cell = Cell {
                    starts: Vec::with_capacity(obs.len()),
                    values: Vec::with_capacity(obs.len() * width),
                    y: Vec::with_capacity(obs.len()),
                };
                for o in obs {
                    cell.starts.push(basis.eval_into(o.time, &mut buf)?);
                    cell.values.extend_from_slice(&buf);
                    cell.y.push(o.value);
                }
                cells.push(cell);
            }
        }
        let moments = cells.iter().map(|c| Moments::new(c, width)).collect();
        Ok(Self {
            num_subjects: panel.num_subjects(),
            num_series: panel.num_series(),
            num_basis: basis.num_basis(),
            width,
            cells,
            moments,
        })
    }

    fn check(&self, params: &ModelParams) -> Result<()> {
        params.check_shapes()?;
        if params.num_subjects() != self.num_subjects
            || params.num_series() != self.num_series
            || params.basis.num_basis() != self.num_basis
            || params.basis.degree() + 1 != self.width
        {
            return Err(Error::ShapeMismatch(format!(
                "panel is {}x{} with {} basis functions, parameters are {}x{} with {}",
                self.num_subjects,
                self.num_series,
                self.num_basis,
                params.num_subjects(),
                params.num_series(),
                params.basis.num_basis()
            )));
        }
        Ok(())
    }

    /// Squared error summed over all observations, accumulated residual by
    /// residual.
    pub fn data_loss(&self, params: &ModelParams) -> Result<f64> {
        self.check(params)?;
        Ok(self.residual_pass(params))
    }

    pub fn loss(&self, params: &ModelParams, lambda: f64) -> Result<f64> {
        Ok(self.data_loss(params)? + lambda * params.penalty())
    }

    /// Loss and both block gradients, computed from the cell moments. The
    /// loss agrees with [`Objective::loss`] up to rounding.
    pub fn evaluate(&self, params: &ModelParams, lambda: f64) -> Result<Evaluation> {
        self.check(params)?;
        let r = params.rank();
        let mut grad_f = DMatrix::zeros(self.num_series, r);
        let mut grad_w = vec![DMatrix::zeros(r, self.num_basis); self.num_subjects];
        let data_loss = self.moment_pass(params, &mut grad_f, &mut grad_w);
        grad_f += &params.factors * (2.0 * lambda);
        for (g, w) in grad_w.iter_mut().zip(&params.weights) {
            *g += w * (2.0 * lambda);
        }
        Ok(Evaluation {
            loss: data_loss + lambda * params.penalty(),
            data_loss,
            grad_f,
            grad_w,
        })
    }

    /// With `u = W_i' f_j` and `v = h - G u`, a cell contributes
    /// `yy - u'h - u'v` to the loss, `-2 f_j v'` to the `W_i` gradient and
    /// `-2 W_i v` to the `f_j` gradient. Cells are visited in a fixed order.
    fn moment_pass(&self, params: &ModelParams, grad_f: &mut DMatrix<f64>, grad_w: &mut [DMatrix<f64>]) -> f64 {
        let r = params.rank();
        let q = self.width;
        let mut f = vec![0.0; r];
        let mut gf = vec![0.0; r];
        let mut u = vec![0.0; self.num_basis];
        let mut v = vec![0.0; self.num_basis];
        let mut total = 0.0;
        for i in 0..self.num_subjects {
            // column m of W_i is w[m*r..(m+1)*r] (column-major storage)
            let w = params.weights[i].as_slice();
            let gw = grad_w[i].as_mut_slice();
            for j in 0..self.num_series {
                let Some(mom) = &self.moments[i * self.num_series + j] else {
                    continue;
                };
                let n = mom.h.len();
                let lo = mom.lo;
                for (c, fv) in f.iter_mut().enumerate() {
                    *fv = params.factors[(j, c)];
                }
                for (k, uk) in u[..n].iter_mut().enumerate() {
                    let col = &w[(lo + k) * r..(lo + k + 1) * r];
                    *uk = col.iter().zip(&f).map(|(a, b)| a * b).sum();
                }
                v[..n].copy_from_slice(&mom.h);
                for k in 0..n {
                    let row = &mom.band[k * q..(k + 1) * q];
                    let mut acc = row[0] * u[k];
                    for o in 1..q.min(n - k) {
                        acc += row[o] * u[k + o];
                        v[k + o] -= row[o] * u[k];
                    }
                    v[k] -= acc;
                }
                let mut cell_loss = mom.yy;
                for k in 0..n {
                    cell_loss -= u[k] * (mom.h[k] + v[k]);
                }
                total += cell_loss;
                gf.iter_mut().for_each(|g| *g = 0.0);
                for k in 0..n {
                    let scale = -2.0 * v[k];
                    let m = lo + k;
                    let col = &w[m * r..(m + 1) * r];
                    for (g, wv) in gf.iter_mut().zip(col) {
                        *g += scale * wv;
                    }
                    let gcol = &mut gw[m * r..(m + 1) * r];
                    for (g, fv) in gcol.iter_mut().zip(&f) {
                        *g += scale * fv;
                    }
                }
                for (c, g) in gf.iter().enumerate() {
                    grad_f[(j, c)] += g;
                }
            }
        }
        total
    }

    fn residual_pass(&self, params: &ModelParams) -> f64 {
        let r = params.rank();
        let q = self.width;
        let mut theta = vec![0.0; r];
        let mut total = 0.0;
        for i in 0..self.num_subjects {
            let w = params.weights[i].as_slice();
            for j in 0..self.num_series {
                let cell = &self.cells[i * self.num_series + j];
                for (k, (&start, &y)) in cell.starts.iter().zip(&cell.y).enumerate() {
                    let b = &cell.values[k * q..(k + 1) * q];
                    theta.iter_mut().for_each(|th| *th = 0.0);
                    for (off, &bv) in b.iter().enumerate() {
                        let col = &w[(start + off) * r..(start + off + 1) * r];
                        for (th, &wv) in theta.iter_mut().zip(col) {
                            *th += wv * bv;
                        }
                    }
                    let pred: f64 = (0..r).map(|c| params.factors[(j, c)] * theta[c]).sum();
                    total += (y - pred).powi(2);
                }
            }
        }
        total
    }
}

fn objective_for(panel: &ObservationPanel, params: &ModelParams) -> Result<Objective> {
    if panel.num_subjects() != params.num_subjects() || panel.num_series() != params.num_series() {
        return Err(Error::ShapeMismatch(format!(
            "panel is {}x{}, parameters are {}x{}",
            panel.num_subjects(),
            panel.num_series(),
            params.num_subjects(),
            params.num_series()
        )));
    }
    Objective::new(panel, &params.basis)
}

/// Penalized loss at `params`.
pub fn loss(panel: &ObservationPanel, params: &ModelParams, lambda: f64) -> Result<f64> {
    objective_for(panel, params)?.loss(params, lambda)
}

/// Partial gradient of the loss with respect to `F` (J x R).
pub fn grad_f(panel: &ObservationPanel, params: &ModelParams, lambda: f64) -> Result<DMatrix<f64>> {
    Ok(objective_for(panel, params)?.evaluate(params, lambda)?.grad_f)
}

/// Partial gradient of the loss with respect to `W_i` (R x M).
pub fn grad_w(panel: &ObservationPanel, params: &ModelParams, lambda: f64, subject: usize) -> Result<DMatrix<f64>> {
    if subject >= params.num_subjects() {
        return Err(Error::Index(format!("subject {subject}")));
    }
    let mut eval = objective_for(panel, params)?.evaluate(params, lambda)?;
    Ok(eval.grad_w.swap_remove(subject))
}

/// Draws `F` and `W` i.i.d. from `Normal(0, init_scale^2)`, `F` first.
pub fn initialize(basis: BSplineBasis, num_subjects: usize, num_series: usize, config: &FitConfig) -> Result<ModelParams> {
    let normal = Normal::new(0.0, config.init_scale)
        .map_err(|e| Error::InvalidArgument(format!("init scale: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let r = config.rank;
    let m = basis.num_basis();
    let factors = DMatrix::from_row_iterator(num_series, r, (0..num_series * r).map(|_| normal.sample(&mut rng)));
    let weights = (0..num_subjects)
        .map(|_| DMatrix::from_row_iterator(r, m, (0..r * m).map(|_| normal.sample(&mut rng))))
        .collect();
    ModelParams::new(basis, factors, weights)
}

/// Fits the model by alternating gradient descent from a seeded random start.
pub fn fit(panel: &ObservationPanel, config: &FitConfig) -> Result<(ModelParams, FitReport)> {
    config.validate()?;
    let basis = BSplineBasis::new(panel.domain_end(), config.num_basis, config.degree)?;
    let init = initialize(basis, panel.num_subjects(), panel.num_series(), config)?;
    fit_from(panel, config, init)
}

fn descend(x: &mut [f64], grad: &[f64], step: f64) {
    for (v, g) in x.iter_mut().zip(grad) {
        *v -= step * g;
    }
}

/// Runs alternating gradient descent from the given starting parameters.
///
/// Stops when `|L(s) - L(s-1)| / L(s-1) < stop_eps` or after `max_iters`
/// sweeps; a non-finite loss or a jump by more than [`DIVERGENCE_FACTOR`]
/// is reported as [`Error::Divergence`].
pub fn fit_from(panel: &ObservationPanel, config: &FitConfig, init: ModelParams) -> Result<(ModelParams, FitReport)> {
    config.validate()?;
    let started = Instant::now();
    let objective = objective_for(panel, &init)?;
    let mut params = init;
    let mut eval = objective.evaluate(&params, config.lambda)?;
    if !eval.loss.is_finite() {
        return Err(Error::Divergence {
            iteration: 0,
            loss: eval.loss,
        });
    }
    let mut trace = vec![eval.loss];
    let mut converged = false;
    let mut iterations = 0;
    let step = config.step_size;

    while iterations < config.max_iters {
        iterations += 1;
        // Both blocks move along gradients taken at the previous iterate.
        descend(params.factors.as_mut_slice(), eval.grad_f.as_slice(), step);
        for (w, g) in params.weights.iter_mut().zip(&eval.grad_w) {
            descend(w.as_mut_slice(), g.as_slice(), step);
        }
        let prev = eval.loss;
        eval = objective.evaluate(&params, config.lambda)?;
        let current = eval.loss;
        if !current.is_finite() || current > DIVERGENCE_FACTOR * prev {
            return Err(Error::Divergence {
                iteration: iterations,
                loss: current,
            });
        }
        trace.push(current);
        let rel = if prev > 0.0 { (current - prev).abs() / prev } else { 0.0 };
        if rel < config.stop_eps {
            converged = true;
            break;
        }
    }

    let report = FitReport {
        final_loss: eval.loss,
        loss_trace: trace,
        iterations_run: iterations,
        converged,
        wall_time: started.elapsed(),
    };
    Ok((params, report))
}
