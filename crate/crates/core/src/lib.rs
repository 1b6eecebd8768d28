//! Individualized dynamic latent factor model (IDLFM) for interpolating
//! irregular, multi-resolution multivariate time series.
//!
//! Each subject `i` carries an `R`-dimensional latent trajectory
//! `theta_i(t) = W_i B(t)` expanded in a clamped B-spline basis, and each
//! series `j` loads on it through a population factor `f_j`, so that
//! `Y_ij(t) ~ f_j' W_i B(t)`. The crate provides:
//!
//! * [`bspline`]: clamped uniform B-spline bases (Cox-de Boor evaluation),
//! * [`data`]: the observation panel, CSV ingestion, standardization and splits,
//! * [`model`]: fitted parameters, prediction and the JSON model file,
//! * [`optim`]: the penalized loss, its gradients and alternating gradient descent,
//! * [`tuning`]: two-phase validation grid search,
//! * [`simgen`]: the simulation scenarios used for benchmarking,
//! * [`baseline`]: a per-series penalized spline comparator,
//! * [`eval`]: MSE metrics and replicated benchmark runs.

pub mod baseline;
pub mod bspline;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod simgen;
pub mod tuning;

pub use baseline::{fit_spline, fit_spline_tuned, predict_spline, SplineFit};
pub use bspline::{BSplineBasis, BasisRow};
pub use data::{
    destandardize, read_panel_csv, split, standardize, CellStats, Observation, ObservationPanel,
    SplitMode, SplitSpec, StandardizationStats,
};
pub use error::{Error, Result};
pub use eval::{mse, run_benchmark, BenchmarkConfig, BenchmarkRow, EvalReport, Method};
pub use model::{ModelFile, ModelParams};
pub use optim::{fit, grad_f, grad_w, loss, FitConfig, FitReport};
pub use simgen::{generate, GroundTruth, Scenario, ScenarioSpec, Simulation};
pub use tuning::{tune, TuneGrid, TuneResult, TuneRow};
