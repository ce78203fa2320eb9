//! Run configuration: one JSON document with a section per subsystem, every
//! tunable named, and environment-variable overrides.
//!
//! The seed is required (there is no wall-clock default). Any field can be
//! overridden with `DARR_<SECTION>__<FIELD>=value`, e.g.
//! `DARR_SOLVER__OUTER_TOL=1e-5` or `DARR_DGP__N=50`; top-level fields use
//! `DARR_SEED`, `DARR_THREADS`.

use crate::data_model::{RandomEffectsCov, TAU_SEL_DEFAULT};
use crate::penalty::{PenaltyFamily, PenaltySpec, MCP_GAMMA_DEFAULT, SCAD_A_DEFAULT};
use crate::robust_init::{PilotConfig, ScatterConfig};
use crate::simulation::{default_beta_star, DgpConfig, Scenario, ScenarioConfig};
use crate::solver::{SolverConfig, Variant};
use crate::weighting::{default_leverage_spec, WeightFamily, WeightFnSpec, HUBER_C_DEFAULT};
use serde::{Deserialize, Serialize};

use super::CliError;

pub const ENV_PREFIX: &str = "DARR_";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Required; all randomness derives from it.
    pub seed: Option<u64>,
    /// Worker threads; 0 means all available cores.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub dgp: DgpSection,
    #[serde(default)]
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub pilot: PilotConfig,
    #[serde(default)]
    pub scatter: ScatterConfig,
    #[serde(default)]
    pub cv: CvSection,
    #[serde(default)]
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            threads: 0,
            dgp: DgpSection::default(),
            scenario: ScenarioSection::default(),
            solver: SolverSection::default(),
            pilot: PilotConfig::default(),
            scatter: ScatterConfig::default(),
            cv: CvSection::default(),
            bench: BenchSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgpSection {
    pub n: usize,
    pub t_per_subject: usize,
    pub p: usize,
    pub s: usize,
    pub rho: f64,
    pub sigma_eps: f64,
    pub d_star_diag: Vec<f64>,
    /// Explicit coefficient vector; defaults to the benchmark pattern.
    pub beta_star: Option<Vec<f64>>,
}

impl Default for DgpSection {
    fn default() -> Self {
        DgpSection {
            n: 100,
            t_per_subject: 5,
            p: 200,
            s: 10,
            rho: 0.5,
            sigma_eps: 1.0,
            d_star_diag: vec![1.0, 0.25],
            beta_star: None,
        }
    }
}

impl DgpSection {
    pub fn to_config(&self, seed: u64) -> Result<DgpConfig, CliError> {
        let beta_star = self
            .beta_star
            .clone()
            .unwrap_or_else(|| default_beta_star(self.p, self.s));
        let cfg = DgpConfig {
            n: self.n,
            t_per_subject: self.t_per_subject,
            p: self.p,
            s: self.s,
            beta_star,
            rho: self.rho,
            d_star: RandomEffectsCov::diagonal(&self.d_star_diag),
            sigma_eps: self.sigma_eps,
            seed,
        };
        cfg.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub scenario: Scenario,
    /// Contamination proportion; defaults to 0 for S1 and 0.1 otherwise.
    pub pi: Option<f64>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            scenario: Scenario::S1,
            pi: None,
        }
    }
}

impl ScenarioSection {
    pub fn to_config(&self) -> Result<ScenarioConfig, CliError> {
        let pi = self.pi.unwrap_or(match self.scenario {
            Scenario::S1 => 0.0,
            _ => 0.1,
        });
        ScenarioConfig::new(self.scenario, pi).map_err(|e| CliError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub family: PenaltyFamily,
    /// Penalty level; when absent, `fit` selects it by cross-validation.
    pub lambda: Option<f64>,
    /// Concavity parameter; defaults per family.
    pub gamma: Option<f64>,
    pub adaptive_weights: Option<Vec<f64>>,
    pub outer_tol: f64,
    pub outer_max_iter: usize,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub lla_steps: usize,
    pub active_set: bool,
    /// Residual weight family; the redescending bisquare is the default so
    /// gross outliers reach weight exactly zero.
    pub residual_family: WeightFamily,
    pub residual_cutoff: f64,
    /// Bisquare cutoff for the leverage factor on raw d^2; defaults to the
    /// chi-square 0.99 quantile at p degrees of freedom.
    pub leverage_cutoff: Option<f64>,
    pub variant: Variant,
    pub oracle_support: Option<Vec<usize>>,
    pub tau_sel: f64,
    pub write_weights_csv: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            family: PenaltyFamily::Scad,
            lambda: None,
            gamma: None,
            adaptive_weights: None,
            outer_tol: 1e-4,
            outer_max_iter: 50,
            inner_tol: 1e-7,
            inner_max_iter: 500,
            lla_steps: 2,
            active_set: true,
            residual_family: WeightFamily::Bisquare,
            residual_cutoff: HUBER_C_DEFAULT,
            leverage_cutoff: None,
            variant: Variant::Darr,
            oracle_support: None,
            tau_sel: TAU_SEL_DEFAULT,
            write_weights_csv: true,
        }
    }
}

impl SolverSection {
    pub fn penalty(&self, lambda: f64) -> Result<PenaltySpec, CliError> {
        let gamma = self.gamma.unwrap_or(match self.family {
            PenaltyFamily::Mcp => MCP_GAMMA_DEFAULT,
            PenaltyFamily::Scad => SCAD_A_DEFAULT,
            _ => 0.0,
        });
        let spec = PenaltySpec {
            family: self.family,
            lambda,
            gamma,
            adaptive_weights: self.adaptive_weights.clone(),
        };
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }

    /// Builds the solver config for a dataset with `p` columns.
    pub fn to_solver_config(
        &self,
        p: usize,
        seed: u64,
        lambda: f64,
        pilot: &PilotConfig,
        scatter: &ScatterConfig,
    ) -> Result<SolverConfig, CliError> {
        let penalty = self.penalty(lambda)?;
        let leverage_weight = match self.leverage_cutoff {
            Some(c) if c > 0.0 => WeightFnSpec::bisquare(c),
            Some(c) => {
                return Err(CliError::Config(format!(
                    "leverage_cutoff must be positive, got {c}"
                )))
            }
            None => default_leverage_spec(p),
        };
        if !(self.residual_cutoff > 0.0) {
            return Err(CliError::Config(format!(
                "residual_cutoff must be positive, got {}",
                self.residual_cutoff
            )));
        }
        let residual_weight = WeightFnSpec {
            family: self.residual_family,
            cutoff: self.residual_cutoff,
        };
        let cfg = SolverConfig {
            penalty,
            outer_tol: self.outer_tol,
            outer_max_iter: self.outer_max_iter,
            inner_tol: self.inner_tol,
            inner_max_iter: self.inner_max_iter,
            lla_steps: self.lla_steps,
            active_set: self.active_set,
            residual_weight,
            leverage_weight,
            variant: self.variant,
            oracle_support: self.oracle_support.clone(),
            seed,
            tau_sel: self.tau_sel,
            delta_override: None,
            pilot: pilot.clone(),
            scatter: scatter.clone(),
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvSection {
    pub k: usize,
    pub n_lambda: usize,
}

impl Default for CvSection {
    fn default() -> Self {
        CvSection { k: 5, n_lambda: 25 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub replications: usize,
    pub scenarios: Vec<Scenario>,
    pub methods: Vec<Variant>,
    pub n_test: usize,
    pub pi: f64,
    /// Fold count and grid size for the in-benchmark CV; default to `cv`.
    pub cv_k: Option<usize>,
    pub cv_n_lambda: Option<usize>,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            replications: 20,
            scenarios: vec![Scenario::S1, Scenario::S2, Scenario::S3],
            methods: vec![
                Variant::Darr,
                Variant::NonrobustPenalized,
                Variant::RobustUnpenalized,
                Variant::OracleRestricted,
                Variant::MarginalLasso,
            ],
            n_test: 100,
            pi: 0.1,
            cv_k: None,
            cv_n_lambda: None,
        }
    }
}

impl RunConfig {
    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| {
            CliError::Config("config field 'seed' is required (no wall-clock default)".into())
        })
    }

    /// Parses a config document, applying `DARR_*` environment overrides.
    pub fn from_json_str(text: &str) -> Result<RunConfig, CliError> {
        let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| {
            CliError::Config(format!(
                "config parse error at line {}, column {}: {e}",
                e.line(),
                e.column()
            ))
        })?;
        apply_env_overrides(&mut value, std::env::vars())?;
        serde_json::from_value(value)
            .map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }
}

/// Applies `DARR_SECTION__FIELD=value` overrides onto the raw JSON document.
fn apply_env_overrides(
    value: &mut serde_json::Value,
    vars: impl Iterator<Item = (String, String)>,
) -> Result<(), CliError> {
    let mut overrides: Vec<(String, String)> = vars
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    overrides.sort();
    for (key, raw) in overrides {
        let path = key[ENV_PREFIX.len()..].to_ascii_lowercase();
        let segments: Vec<&str> = path.split("__").collect();
        if segments.iter().any(|s| s.is_empty()) {
            return Err(CliError::Config(format!(
                "malformed override variable {key}"
            )));
        }
        let parsed: serde_json::Value = serde_json::from_str(&raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
        let (last, parents) = segments.split_last().expect("segments nonempty");
        let mut slot = &mut *value;
        for seg in parents {
            if !slot.is_object() {
                return Err(CliError::Config(format!(
                    "override {key} does not address an object"
                )));
            }
            slot = slot
                .as_object_mut()
                .expect("checked above")
                .entry(seg.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
        let obj = slot.as_object_mut().ok_or_else(|| {
            CliError::Config(format!("override {key} does not address an object"))
        })?;
        obj.insert(last.to_string(), parsed);
    }
    Ok(())
}
