//! Shared fixtures for the criterion benchmarks.

use idlfm_core::{generate, FitConfig, Scenario, ScenarioSpec, Simulation};

/// A desk-scale Setting 1.3 replication.
pub fn desk_simulation(seed: u64) -> Simulation {
    generate(&ScenarioSpec::desk(Scenario::S1_3).with_seed(seed)).expect("desk scenario is valid")
}

pub fn desk_config() -> FitConfig {
    FitConfig {
        rank: 3,
        lambda: 0.1,
        step_size: 1e-4,
        num_basis: 60,
        max_iters: 50,
        stop_eps: 1e-12,
        ..FitConfig::default()
    }
}
