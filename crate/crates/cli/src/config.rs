//! Layered settings: built-in preset, then the JSON config file, then flags.

use std::path::Path;

use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use idlfm_core::{FitConfig, ScenarioSpec, TuneGrid};

/// Each section is a partial object laid over the preset, so a file only
/// needs the keys it changes.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub fit: Option<Value>,
    pub tune: Option<Value>,
    pub scenario: Option<Value>,
    pub benchmark: Option<Value>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    }
}

/// Replaces the fields of `base` named in `patch`, recursing into objects.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: Option<&Value>, section: &str) -> Result<T, String> {
    let Some(patch) = patch else {
        return serde_json::from_value(serde_json::to_value(base).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string());
    };
    let mut value = serde_json::to_value(base).map_err(|e| e.to_string())?;
    merge(&mut value, patch);
    serde_json::from_value(value).map_err(|e| format!("config section '{section}': {e}"))
}

fn merge(target: &mut Value, patch: &Value) {
    match (target, patch) {
        (Value::Object(t), Value::Object(p)) => {
            for (k, v) in p {
                match t.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        t.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (t, p) => *t = p.clone(),
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct FitFlags {
    /// Latent rank R.
    #[arg(long)]
    pub rank: Option<usize>,
    /// Ridge penalty on F and W.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub step_size: Option<f64>,
    /// Relative loss change that stops the descent.
    #[arg(long)]
    pub stop_eps: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Number of B-spline basis functions M.
    #[arg(long)]
    pub num_basis: Option<usize>,
    #[arg(long)]
    pub degree: Option<usize>,
    /// Standard deviation of the random initialization.
    #[arg(long)]
    pub init_scale: Option<f64>,
}

impl FitFlags {
    pub fn apply(&self, cfg: &mut FitConfig) {
        set(&mut cfg.rank, self.rank);
        set(&mut cfg.lambda, self.lambda);
        set(&mut cfg.step_size, self.step_size);
        set(&mut cfg.stop_eps, self.stop_eps);
        set(&mut cfg.max_iters, self.max_iters);
        set(&mut cfg.num_basis, self.num_basis);
        set(&mut cfg.degree, self.degree);
        set(&mut cfg.init_scale, self.init_scale);
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct TuneFlags {
    /// Comma-separated penalty candidates.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Comma-separated rank candidates.
    #[arg(long, value_delimiter = ',')]
    pub ranks: Option<Vec<usize>>,
    /// Comma-separated step-size candidates.
    #[arg(long, value_delimiter = ',')]
    pub steps: Option<Vec<f64>>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
}

impl TuneFlags {
    pub fn apply(&self, grid: &mut TuneGrid) {
        set(&mut grid.lambda_candidates, self.lambdas.clone());
        set(&mut grid.rank_candidates, self.ranks.clone());
        set(&mut grid.step_candidates, self.steps.clone());
        set(&mut grid.validation_fraction, self.validation_fraction);
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct ScenarioFlags {
    /// Number of subjects I.
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Number of series J.
    #[arg(long)]
    pub series: Option<usize>,
    #[arg(long)]
    pub rank_true: Option<usize>,
    /// Time grid length T.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    /// Sampling probability of densely observed series.
    #[arg(long)]
    pub observe_prob: Option<f64>,
    /// Sampling probability of sparsely observed series.
    #[arg(long)]
    pub sparse_prob: Option<f64>,
}

impl ScenarioFlags {
    pub fn apply(&self, spec: &mut ScenarioSpec) {
        set(&mut spec.num_subjects, self.subjects);
        set(&mut spec.num_series, self.series);
        set(&mut spec.rank_true, self.rank_true);
        set(&mut spec.horizon, self.horizon);
        set(&mut spec.noise_sd, self.noise_sd);
        if self.observe_prob.is_some() {
            spec.observe_prob = self.observe_prob;
        }
        if self.sparse_prob.is_some() {
            spec.sparse_prob = self.sparse_prob;
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
