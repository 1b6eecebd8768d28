//! Simulated multi-resolution panels with known latent structure.
//!
//! Every scenario draws `f_j ~ N(0, I_R)`, evaluates `psi_ij(t) = f_j' theta_i(t)`
//! on the integer grid `t = 1..T`, adds Gaussian noise and then applies the
//! scenario's observation scheme. The last series is the interpolation
//! target: its unobserved grid points form the test panel.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Observation, ObservationPanel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Scenario {
    S1_1,
    S1_2,
    S1_3,
    S2_1,
    S2_2,
    S2_3,
    S3_1,
    S3_2,
    S3_3,
    Mcar,
    Mar,
    Mnar,
}

impl Scenario {
    pub const ALL: [Scenario; 12] = [
        Scenario::S1_1,
        Scenario::S1_2,
        Scenario::S1_3,
        Scenario::S2_1,
        Scenario::S2_2,
        Scenario::S2_3,
        Scenario::S3_1,
        Scenario::S3_2,
        Scenario::S3_3,
        Scenario::Mcar,
        Scenario::Mar,
        Scenario::Mnar,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::S1_1 => "S1.1",
            Scenario::S1_2 => "S1.2",
            Scenario::S1_3 => "S1.3",
            Scenario::S2_1 => "S2.1",
            Scenario::S2_2 => "S2.2",
            Scenario::S2_3 => "S2.3",
            Scenario::S3_1 => "S3.1",
            Scenario::S3_2 => "S3.2",
            Scenario::S3_3 => "S3.3",
            Scenario::Mcar => "MCAR",
            Scenario::Mar => "MAR",
            Scenario::Mnar => "MNAR",
        }
    }

    fn default_series(self) -> usize {
        match self {
            Scenario::S3_1 | Scenario::S3_2 | Scenario::S3_3 => 101,
            _ => 5,
        }
    }

    /// Default Bernoulli observation probability for dense series.
    fn default_observe_prob(self) -> f64 {
        match self {
            Scenario::S1_1 | Scenario::S3_1 => 0.8,
            _ => 0.7,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownScenario(s.to_string()))
    }
}

impl TryFrom<String> for Scenario {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Scenario> for String {
    fn from(s: Scenario) -> String {
        s.as_str().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub num_subjects: usize,
    pub num_series: usize,
    pub rank_true: usize,
    /// `T`: observations live on the grid `1..=T`.
    pub horizon: usize,
    pub noise_sd: f64,
    pub seed: u64,
    /// Overrides the Bernoulli probability of densely sampled series.
    #[serde(default)]
    pub observe_prob: Option<f64>,
    /// Overrides the Bernoulli probability of sparsely sampled series
    /// (the 0.2 series of S1.1 and S3.1).
    #[serde(default)]
    pub sparse_prob: Option<f64>,
}

impl ScenarioSpec {
    /// Full-scale defaults: R = 3, I = 30, J = 5 (101 for S3.x), T = 1000,
    /// noise sd 0.5.
    pub fn full(scenario: Scenario) -> Self {
        Self {
            scenario,
            num_subjects: 30,
            num_series: scenario.default_series(),
            rank_true: 3,
            horizon: 1000,
            noise_sd: 0.5,
            seed: 0,
            observe_prob: None,
            sparse_prob: None,
        }
    }

    /// Desk-scale preset: I = 10, T = 200.
    pub fn desk(scenario: Scenario) -> Self {
        Self {
            num_subjects: 10,
            horizon: 200,
            ..Self::full(scenario)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_subjects == 0 || self.num_series == 0 || self.horizon == 0 {
            return bad("subjects, series and horizon must be positive".into());
        }
        if !(1..=3).contains(&self.rank_true) {
            return bad(format!("true rank must be 1, 2 or 3, got {}", self.rank_true));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return bad(format!("noise sd must be non-negative, got {}", self.noise_sd));
        }
        for p in [self.observe_prob, self.sparse_prob].into_iter().flatten() {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("probability {p} outside [0, 1]"));
            }
        }
        if matches!(self.scenario, Scenario::Mar | Scenario::Mnar) && self.num_series < 2 {
            return bad("missingness scenarios need at least two series".into());
        }
        Ok(())
    }

    fn observe_prob(&self) -> f64 {
        self.observe_prob.unwrap_or(self.scenario.default_observe_prob())
    }

    fn sparse_prob(&self) -> f64 {
        self.sparse_prob.unwrap_or(0.2)
    }
}

/// The three latent trajectories of subject number `subject` (1-based, as in
/// the pulse centres `60 + 10 i`).
pub fn theta(scenario: Scenario, subject: usize, t: f64) -> [f64; 3] {
    let shift = match scenario {
        Scenario::S2_1 => 0.0,
        _ => 10.0 * subject as f64,
    };
    let pulses = 2.0 * (-(t - 60.0 - shift).powi(2) / 50.0).exp() + 4.0 * (-(t - 70.0 - shift).powi(2) / 20.0).exp();
    let trend = match scenario {
        Scenario::S2_1 | Scenario::S2_2 => 0.2 * (t + 1.0).ln(),
        _ => subject as f64 * 0.02 * (t + 1.0).ln(),
    };
    let season = (0.12 * PI * t + 1.0).cos();
    [pulses, trend, season]
}

/// Returns `t -> theta_i(t)` for subject number `subject >= 1`.
pub fn make_theta(scenario: Scenario, subject: usize) -> Result<impl Fn(f64) -> [f64; 3]> {
    if subject == 0 {
        return Err(Error::Index("subject numbers start at 1".into()));
    }
    Ok(move |t| theta(scenario, subject, t))
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// `true` where the value exceeds the 90% quantile of the series: the
/// missing points under MAR (driver = first series) and MNAR (driver = the
/// target itself).
pub fn exceedance_mask(driver: &[f64]) -> Vec<bool> {
    let q = quantile(driver, 0.9);
    driver.iter().map(|&v| v > q).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub scenario: Scenario,
    pub factors: DMatrix<f64>,
    pub num_subjects: usize,
    pub num_series: usize,
    pub horizon: usize,
    /// Noiseless `psi_ij(t)` on `t = 1..=T`, laid out (subject, series, t).
    pub psi: Vec<f64>,
    /// Realized noisy values on the full grid, same layout.
    pub realized: Vec<f64>,
    /// Training-observation mask, same layout.
    pub observed: Vec<bool>,
}

impl GroundTruth {
    fn idx(&self, subject: usize, series: usize, t: usize) -> usize {
        (subject * self.num_series + series) * self.horizon + (t - 1)
    }

    /// `psi` at grid time `t` in `1..=T` (0-based subject and series).
    pub fn psi_at(&self, subject: usize, series: usize, t: usize) -> f64 {
        self.psi[self.idx(subject, series, t)]
    }

    pub fn realized_at(&self, subject: usize, series: usize, t: usize) -> f64 {
        self.realized[self.idx(subject, series, t)]
    }

    pub fn is_observed(&self, subject: usize, series: usize, t: usize) -> bool {
        self.observed[self.idx(subject, series, t)]
    }

    /// Latent trajectories of 0-based `subject` at any time.
    pub fn theta(&self, subject: usize, t: f64) -> [f64; 3] {
        theta(self.scenario, subject + 1, t)
    }

    /// Noiseless truth as a panel on the full grid: `subject,series,time,psi`.
    pub fn psi_rows(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        (0..self.num_subjects).flat_map(move |i| {
            (0..self.num_series)
                .flat_map(move |j| (1..=self.horizon).map(move |t| (i, j, t, self.psi_at(i, j, t))))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub train: ObservationPanel,
    pub test: ObservationPanel,
    pub truth: GroundTruth,
}

/// Generates one replication of a scenario. Deterministic in `spec`.
pub fn generate(spec: &ScenarioSpec) -> Result<Simulation> {
    spec.validate()?;
    let (n_i, n_j, n_t, r) = (spec.num_subjects, spec.num_series, spec.horizon, spec.rank_true);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let factors = DMatrix::from_row_iterator(n_j, r, (0..n_j * r).map(|_| rng.sample::<f64, _>(StandardNormal)));

    let mut psi = Vec::with_capacity(n_i * n_j * n_t);
    for i in 0..n_i {
        let thetas: Vec<[f64; 3]> = (1..=n_t).map(|t| theta(spec.scenario, i + 1, t as f64)).collect();
        for j in 0..n_j {
            psi.extend(thetas.iter().map(|th| (0..r).map(|c| factors[(j, c)] * th[c]).sum::<f64>()));
        }
    }
    let realized: Vec<f64> = psi
        .iter()
        .map(|&v| v + spec.noise_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let observed = observation_mask(spec, &realized, &mut rng);

    let truth = GroundTruth {
        scenario: spec.scenario,
        factors,
        num_subjects: n_i,
        num_series: n_j,
        horizon: n_t,
        psi,
        realized,
        observed,
    };

    let target = n_j - 1;
    let mut train = vec![vec![Vec::new(); n_j]; n_i];
    let mut test = vec![vec![Vec::new(); n_j]; n_i];
    for i in 0..n_i {
        for j in 0..n_j {
            for t in 1..=n_t {
                let o = Observation::new(t as f64, truth.realized_at(i, j, t));
                if truth.is_observed(i, j, t) {
                    train[i][j].push(o);
                } else if j == target {
                    test[i][j].push(o);
                }
            }
        }
    }
    let subjects: Vec<String> = (1..=n_i).map(|i| format!("s{i}")).collect();
    let series: Vec<String> = (1..=n_j).map(|j| format!("y{j}")).collect();
    let end = n_t as f64;
    Ok(Simulation {
        train: ObservationPanel::new(subjects.clone(), series.clone(), end, train)?,
        test: ObservationPanel::with_empty_allowed(subjects, series, end, test)?,
        truth,
    })
}

/// Grid stride of a fixed-grid series (1 = every point, 2 = odd points, ...).
fn fixed_stride(scenario: Scenario, series: usize, num_series: usize) -> usize {
    match scenario {
        Scenario::S1_2 => {
            if series + 1 == num_series {
                4
            } else if series + 2 == num_series {
                2
            } else {
                1
            }
        }
        _ => {
            // S3.2: 60 / 20 / 21 of 101 series, scaled to J.
            let full = (num_series as f64 * 60.0 / 101.0).round() as usize;
            let half = (num_series as f64 * 80.0 / 101.0).round() as usize;
            if series < full {
                1
            } else if series < half {
                2
            } else {
                4
            }
        }
    }
}

fn observation_mask(spec: &ScenarioSpec, realized: &[f64], rng: &mut ChaCha8Rng) -> Vec<bool> {
    let (n_i, n_j, n_t) = (spec.num_subjects, spec.num_series, spec.horizon);
    let dense = spec.observe_prob();
    let sparse = spec.sparse_prob();
    let mut mask = Vec::with_capacity(n_i * n_j * n_t);
    match spec.scenario {
        Scenario::S1_2 | Scenario::S3_2 => {
            for _ in 0..n_i {
                for j in 0..n_j {
                    let stride = fixed_stride(spec.scenario, j, n_j);
                    mask.extend((1..=n_t).map(|t| (t - 1) % stride == 0));
                }
            }
        }
        Scenario::S2_1 | Scenario::S2_2 | Scenario::S2_3 => {
            let shared: Vec<bool> = (0..n_t).map(|_| rng.random_bool(dense)).collect();
            for _ in 0..n_i * n_j {
                mask.extend_from_slice(&shared);
            }
        }
        Scenario::S1_1 | Scenario::S3_1 => {
            let dense_count = match spec.scenario {
                Scenario::S1_1 => n_j - 1,
                _ => (n_j as f64 * 80.0 / 101.0).round() as usize,
            };
            for _ in 0..n_i {
                for j in 0..n_j {
                    let p = if j < dense_count { dense } else { sparse };
                    mask.extend((0..n_t).map(|_| rng.random_bool(p)));
                }
            }
        }
        Scenario::S1_3 | Scenario::S3_3 | Scenario::Mcar => {
            mask.extend((0..n_i * n_j * n_t).map(|_| rng.random_bool(dense)));
        }
        Scenario::Mar | Scenario::Mnar => {
            let target = n_j - 1;
            for i in 0..n_i {
                let cell = |j: usize| &realized[(i * n_j + j) * n_t..(i * n_j + j + 1) * n_t];
                for j in 0..n_j {
                    if j == target {
                        let driver = if spec.scenario == Scenario::Mar { cell(0) } else { cell(target) };
                        let exceeds = exceedance_mask(driver);
                        mask.extend(exceeds.into_iter().map(|missing| rng.random_bool(dense) && !missing));
                    } else if j == 0 && spec.scenario == Scenario::Mar {
                        mask.extend(std::iter::repeat(true).take(n_t));
                    } else {
                        mask.extend((0..n_t).map(|_| rng.random_bool(dense)));
                    }
                }
            }
        }
    }
    mask
}
