//! Benchmark data-generating process and contamination scenarios.
//!
//! Clean data follow a random-intercept/random-slope mixed model with AR(1)
//! correlated fixed-effect covariates. Contamination either replaces the error
//! term of randomly chosen observations with a large positive shift (vertical
//! outliers) or turns whole subjects into bad leverage points by rewriting
//! their active covariates and responses. All randomness flows from a single
//! seeded stream per call; no global state.

use crate::data_model::{LongitudinalDataset, RandomEffectsCov, SubjectBlock};
use crate::numerics::{sym_eigen, Mat, RngStream};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Nonzero coefficient pattern used by the benchmark.
pub const ACTIVE_BETA: [f64; 10] = [2.0, -1.5, 1.0, -2.5, 1.8, 2.2, -1.2, 1.5, -2.0, 1.0];

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid DGP config: {0}")]
    InvalidDgp(String),
    #[error("invalid scenario config: {0}")]
    InvalidScenario(String),
}

/// Data-generating configuration. Defaults are the benchmark values:
/// n = 100 subjects, T = 5 visits, p = 200 with s = 10 active coefficients,
/// AR(1) covariates at rho = 0.5, D = diag(1, 0.25), sigma = 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub t_per_subject: usize,
    pub p: usize,
    pub s: usize,
    pub beta_star: Vec<f64>,
    pub rho: f64,
    pub d_star: RandomEffectsCov,
    pub sigma_eps: f64,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            n: 100,
            t_per_subject: 5,
            p: 200,
            s: 10,
            beta_star: default_beta_star(200, 10),
            rho: 0.5,
            d_star: RandomEffectsCov::diagonal(&[1.0, 0.25]),
            sigma_eps: 1.0,
            seed: 0,
        }
    }
}

/// The benchmark coefficient vector: the active pattern (cycled if s > 10)
/// followed by zeros.
pub fn default_beta_star(p: usize, s: usize) -> Vec<f64> {
    assert!(s <= p);
    let mut beta = vec![0.0; p];
    for (j, b) in beta.iter_mut().take(s).enumerate() {
        *b = ACTIVE_BETA[j % ACTIVE_BETA.len()];
    }
    beta
}

impl DgpConfig {
    pub fn validate(&self) -> Result<(), SimulationError> {
        if self.s > self.p {
            return Err(SimulationError::InvalidDgp(format!(
                "s = {} exceeds p = {}",
                self.s, self.p
            )));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(SimulationError::InvalidDgp(format!(
                "|rho| must be < 1, got {}",
                self.rho
            )));
        }
        if self.beta_star.len() != self.p {
            return Err(SimulationError::InvalidDgp(format!(
                "beta_star has length {}, expected p = {}",
                self.beta_star.len(),
                self.p
            )));
        }
        if !(self.sigma_eps >= 0.0) {
            return Err(SimulationError::InvalidDgp("sigma_eps must be >= 0".into()));
        }
        if self.n == 0 || self.t_per_subject == 0 {
            return Err(SimulationError::InvalidDgp(
                "n and T must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> DgpConfig {
        DgpConfig {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    S1,
    S2,
    S3,
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scenario::S1 => write!(f, "S1"),
            Scenario::S2 => write!(f, "S2"),
            Scenario::S3 => write!(f, "S3"),
        }
    }
}

/// Contamination scenario and proportion. S1 is clean (pi forced to 0);
/// S2 and S3 require pi in (0, 0.5).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub pi: f64,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, pi: f64) -> Result<Self, SimulationError> {
        let cfg = ScenarioConfig { scenario, pi };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn clean() -> Self {
        ScenarioConfig {
            scenario: Scenario::S1,
            pi: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        if !(0.0..0.5).contains(&self.pi) {
            return Err(SimulationError::InvalidScenario(format!(
                "pi must be in [0, 0.5), got {}",
                self.pi
            )));
        }
        match self.scenario {
            Scenario::S1 if self.pi != 0.0 => Err(SimulationError::InvalidScenario(
                "S1 is the clean scenario; pi must be 0".into(),
            )),
            Scenario::S2 | Scenario::S3 if self.pi == 0.0 => {
                Err(SimulationError::InvalidScenario(format!(
                    "{} requires a positive contamination proportion",
                    self.scenario
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Ground truth retained for metric computation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimTruth {
    pub beta_star: Vec<f64>,
    pub support: Vec<usize>,
    pub d_star: RandomEffectsCov,
    pub sigma_eps: f64,
    pub b: Vec<Vec<f64>>,
    /// Flattened row indices of contaminated observations, ascending.
    pub contaminated_rows: Vec<usize>,
    /// Indices of fully contaminated subjects (S3), ascending.
    pub contaminated_subjects: Vec<usize>,
}

/// Half-up rounding of pi * count, exact for the benchmark settings.
fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// One AR(1) covariate row: x_1 = eta_1, x_j = rho x_{j-1} + sqrt(1-rho^2) eta_j.
fn ar1_row(rng: &mut RngStream, p: usize, rho: f64) -> Vec<f64> {
    let noise = (1.0 - rho * rho).sqrt();
    let mut row = Vec::with_capacity(p);
    let mut prev = rng.normal();
    row.push(prev);
    for _ in 1..p {
        prev = rho * prev + noise * rng.normal();
        row.push(prev);
    }
    row
}

/// Generates a clean dataset plus its ground truth. Deterministic given the
/// config seed; draws are subject-major (random effect, then per visit the
/// covariate row and the error).
pub fn generate(cfg: &DgpConfig) -> (LongitudinalDataset, SimTruth) {
    cfg.validate().expect("invalid DGP config");
    let mut rng = RngStream::new(cfg.seed, 0);
    generate_with_stream(cfg, &mut rng, "s")
}

fn generate_with_stream(
    cfg: &DgpConfig,
    rng: &mut RngStream,
    id_prefix: &str,
) -> (LongitudinalDataset, SimTruth) {
    let q = cfg.d_star.dim();
    // Symmetric square root of D*, exact for rank-deficient covariances.
    let d_sqrt = {
        let (vals, vecs) = sym_eigen(cfg.d_star.matrix());
        vecs.matmul(&Mat::diag(
            &vals.iter().map(|&v| v.max(0.0).sqrt()).collect::<Vec<_>>(),
        ))
    };
    let mut subjects = Vec::with_capacity(cfg.n);
    let mut b_all = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let eta: Vec<f64> = (0..q).map(|_| rng.normal()).collect();
        let b = d_sqrt.matvec(&eta);
        let mut times = Vec::with_capacity(cfg.t_per_subject);
        let mut y = Vec::with_capacity(cfg.t_per_subject);
        let mut x_rows = Vec::with_capacity(cfg.t_per_subject);
        let mut z_rows = Vec::with_capacity(cfg.t_per_subject);
        for t in 1..=cfg.t_per_subject {
            let time = t as f64;
            let x = ar1_row(rng, cfg.p, cfg.rho);
            let z = vec![1.0, time / 5.0];
            let eps = cfg.sigma_eps * rng.normal();
            let mean = crate::numerics::dot(&x, &cfg.beta_star) + crate::numerics::dot(&z, &b);
            times.push(time);
            y.push(mean + eps);
            x_rows.push(x);
            z_rows.push(z);
        }
        subjects.push(SubjectBlock {
            id: format!("{id_prefix}{:04}", i + 1),
            times,
            y,
            x: Mat::from_rows(&x_rows),
            z: Mat::from_rows(&z_rows),
        });
        b_all.push(b);
    }
    let dataset = LongitudinalDataset {
        subjects,
        p: cfg.p,
        q: 2,
    };
    let truth = SimTruth {
        beta_star: cfg.beta_star.clone(),
        support: cfg
            .beta_star
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0.0)
            .map(|(j, _)| j)
            .collect(),
        d_star: cfg.d_star.clone(),
        sigma_eps: cfg.sigma_eps,
        b: b_all,
        contaminated_rows: Vec::new(),
        contaminated_subjects: Vec::new(),
    };
    (dataset, truth)
}

/// Applies the configured contamination scenario.
///
/// S1 returns the inputs unchanged. S2 replaces the error term of exactly
/// round(pi N) observations with a draw from N(20, 1), keeping X, Z, and the
/// realized random effects fixed. S3 rewrites all visits of exactly
/// round(pi n) subjects: active covariates become N(10, 0.1) draws and the
/// response becomes N(30, 1); inactive columns are untouched.
pub fn contaminate(
    dataset: &LongitudinalDataset,
    truth: &SimTruth,
    scenario: &ScenarioConfig,
    seed: u64,
) -> (LongitudinalDataset, SimTruth) {
    scenario.validate().expect("invalid scenario config");
    let mut out = dataset.clone();
    let mut truth_out = truth.clone();
    match scenario.scenario {
        Scenario::S1 => {}
        Scenario::S2 => {
            let mut rng = RngStream::new(seed, 1);
            let n_total = dataset.total_obs();
            let k = round_half_up(scenario.pi * n_total as f64);
            let rows = rng.sample_indices(n_total, k);
            let offsets = dataset.offsets();
            for &row in &rows {
                // Locate (subject, visit) for the flattened row index.
                let i = match offsets.binary_search(&row) {
                    Ok(exact) => exact,
                    Err(ins) => ins - 1,
                };
                let t = row - offsets[i];
                let s = &mut out.subjects[i];
                let eps_new = 20.0 + rng.normal();
                let mean = crate::numerics::dot(s.x.row(t), &truth.beta_star)
                    + crate::numerics::dot(s.z.row(t), &truth.b[i]);
                s.y[t] = mean + eps_new;
            }
            truth_out.contaminated_rows = rows;
        }
        Scenario::S3 => {
            let mut rng = RngStream::new(seed, 1);
            let m = round_half_up(scenario.pi * dataset.n_subjects() as f64);
            let chosen = rng.sample_indices(dataset.n_subjects(), m);
            let offsets = dataset.offsets();
            let mut rows = Vec::new();
            for &i in &chosen {
                let s = &mut out.subjects[i];
                for t in 0..s.n_obs() {
                    for &j in &truth.support {
                        s.x[(t, j)] = rng.normal_mv(10.0, 0.1);
                    }
                    s.y[t] = rng.normal_mv(30.0, 1.0);
                    rows.push(offsets[i] + t);
                }
            }
            rows.sort_unstable();
            truth_out.contaminated_rows = rows;
            truth_out.contaminated_subjects = chosen;
        }
    }
    (out, truth_out)
}

/// Independently generated clean test set with the same coefficient vector
/// but fresh random effects and errors. Uses a stream disjoint from both
/// [`generate`] (stream 0) and [`contaminate`] (stream 1) under the same seed.
pub fn generate_test_set(
    cfg: &DgpConfig,
    n_test: usize,
    seed: u64,
) -> (LongitudinalDataset, SimTruth) {
    let test_cfg = DgpConfig {
        n: n_test,
        seed,
        ..cfg.clone()
    };
    test_cfg.validate().expect("invalid DGP config");
    let mut rng = RngStream::new(seed, 2);
    generate_with_stream(&test_cfg, &mut rng, "t")
}
