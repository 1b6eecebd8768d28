//! Two-phase validation grid search: the penalty first, then rank and step
//! size jointly.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split, ObservationPanel, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::series_mse;
use crate::optim::{fit, FitConfig};

/// Validation MSEs closer than this are treated as ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneGrid {
    pub lambda_candidates: Vec<f64>,
    pub rank_candidates: Vec<usize>,
    pub step_candidates: Vec<f64>,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Series whose held-out points score the candidates; defaults to the last.
    pub target_series: Option<usize>,
}

impl Default for TuneGrid {
    fn default() -> Self {
        Self {
            lambda_candidates: vec![0.01, 0.1, 1.0, 10.0],
            rank_candidates: (1..=6).collect(),
            step_candidates: vec![1e-6, 1e-5, 1e-4, 1e-3],
            validation_fraction: 0.3,
            seed: 0,
            target_series: None,
        }
    }
}

impl TuneGrid {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_candidates.is_empty() || self.rank_candidates.is_empty() || self.step_candidates.is_empty() {
            return Err(Error::InvalidArgument("every candidate list must be non-empty".into()));
        }
        if self.lambda_candidates.iter().any(|&l| !(l.is_finite() && l > 0.0))
            || self.step_candidates.iter().any(|&s| !(s.is_finite() && s > 0.0))
            || self.rank_candidates.contains(&0)
        {
            return Err(Error::InvalidArgument("candidates must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TunePhase {
    Lambda,
    RankStep,
}

impl TunePhase {
    pub fn as_str(self) -> &'static str {
        match self {
            TunePhase::Lambda => "lambda",
            TunePhase::RankStep => "rank-step",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub phase: TunePhase,
    pub lambda: f64,
    pub rank: usize,
    pub step: f64,
    /// The stopping rule was met before `max_iters`. Only converged rows are
    /// eligible unless none converged.
    pub converged: bool,
    pub diverged: bool,
    /// `+inf` for diverged fits.
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best_lambda: f64,
    pub best_rank: usize,
    pub best_step: f64,
    pub best_val_mse: f64,
    pub rows: Vec<TuneRow>,
}

impl TuneResult {
    /// `base` with the selected hyperparameters.
    pub fn apply(&self, base: &FitConfig) -> FitConfig {
        FitConfig {
            lambda: self.best_lambda,
            rank: self.best_rank,
            step_size: self.best_step,
            ..base.clone()
        }
    }

    /// Writes `phase,lambda,rank,step,converged,val_mse`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["phase", "lambda", "rank", "step", "converged", "val_mse"])?;
        for row in &self.rows {
            w.write_record([
                row.phase.as_str().to_string(),
                row.lambda.to_string(),
                row.rank.to_string(),
                row.step.to_string(),
                row.converged.to_string(),
                row.val_mse.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn score(
    fit_panel: &ObservationPanel,
    val_panel: &ObservationPanel,
    target: usize,
    phase: TunePhase,
    config: FitConfig,
) -> Result<TuneRow> {
    let (val_mse, converged, diverged) = match fit(fit_panel, &config) {
        Ok((params, report)) => (series_mse(&params, val_panel, target)?, report.converged, false),
        Err(Error::Divergence { .. }) => (f64::INFINITY, false, true),
        Err(e) => return Err(e),
    };
    Ok(TuneRow {
        phase,
        lambda: config.lambda,
        rank: config.rank,
        step: config.step_size,
        converged,
        diverged,
        val_mse,
    })
}

/// Index of the best row: lowest validation MSE among converged rows, ties
/// broken toward smaller rank, then smaller penalty, then smaller step. Rows
/// that ran out of iterations compete only when no row converged.
fn best_row(rows: &[TuneRow]) -> Option<usize> {
    let any_converged = rows.iter().any(|r| r.converged);
    let mut order: Vec<usize> = (0..rows.len())
        .filter(|&k| !rows[k].diverged && (rows[k].converged || !any_converged))
        .collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&rows[a], &rows[b]);
        x.rank
            .cmp(&y.rank)
            .then(x.lambda.total_cmp(&y.lambda))
            .then(x.step.total_cmp(&y.step))
    });
    let mut best: Option<usize> = None;
    for k in order {
        match best {
            Some(b) if rows[k].val_mse >= rows[b].val_mse - TIE_TOLERANCE => {}
            _ => best = Some(k),
        }
    }
    best
}

/// Selects `(lambda, rank, step)` by validation MSE on held-out points of the
/// target series.
///
/// Phase one varies the penalty at the base rank and step; phase two fixes
/// the chosen penalty and searches all (rank, step) pairs. Candidate fits
/// run in parallel; diverged fits score `+inf`.
pub fn tune(panel: &ObservationPanel, grid: &TuneGrid, base: &FitConfig) -> Result<TuneResult> {
    grid.validate()?;
    base.validate()?;
    let target = grid.target_series.unwrap_or(panel.num_series() - 1);
    let (fit_panel, val_panel) = split(panel, &SplitSpec::random(grid.validation_fraction, Some(target), grid.seed))?;
    if val_panel.total_observations() == 0 {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }

    let phase1: Vec<FitConfig> = grid
        .lambda_candidates
        .iter()
        .map(|&lambda| FitConfig { lambda, ..base.clone() })
        .collect();
    let mut rows = phase1
        .into_par_iter()
        .map(|cfg| score(&fit_panel, &val_panel, target, TunePhase::Lambda, cfg))
        .collect::<Result<Vec<_>>>()?;
    let best_lambda = match best_row(&rows) {
        Some(k) => rows[k].lambda,
        // nothing converged at the base step; let phase two find a step
        None => grid.lambda_candidates.iter().copied().fold(f64::INFINITY, f64::min),
    };

    let phase2: Vec<FitConfig> = grid
        .rank_candidates
        .iter()
        .flat_map(|&rank| {
            grid.step_candidates.iter().map(move |&step_size| FitConfig {
                rank,
                step_size,
                lambda: best_lambda,
                ..base.clone()
            })
        })
        .collect();
    let phase2_rows = phase2
        .into_par_iter()
        .map(|cfg| score(&fit_panel, &val_panel, target, TunePhase::RankStep, cfg))
        .collect::<Result<Vec<_>>>()?;
    rows.extend(phase2_rows);

    // The phase-one row at the chosen penalty competes too, so the winner is
    // the minimum over every eligible row at that penalty.
    let at_lambda: Vec<usize> = (0..rows.len()).filter(|&k| rows[k].lambda == best_lambda).collect();
    let subset: Vec<TuneRow> = at_lambda.iter().map(|&k| rows[k].clone()).collect();
    let k = at_lambda[best_row(&subset).ok_or(Error::AllDiverged)?];
    Ok(TuneResult {
        best_lambda,
        best_rank: rows[k].rank,
        best_step: rows[k].step,
        best_val_mse: rows[k].val_mse,
        rows,
    })
}
