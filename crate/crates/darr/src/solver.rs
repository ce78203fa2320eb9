//! The penalized M-step, the outer iteration, and the estimator variants.
//!
//! Each outer iteration refreshes the doubly adaptive weights from the current
//! fit, updates random effects and variance components under those weights,
//! and then updates the fixed effects by coordinate descent on the weighted
//! penalized least-squares subproblem with the random effects held fixed.
//! Termination uses the relative l2 change of the coefficient vector.
//!
//! Fits are deterministic given the config seed: the coordinate loop is
//! sequential, per-subject reductions use pairwise summation, and nothing
//! depends on thread count.

use crate::data_model::{
    support, FixedEffects, LongitudinalDataset, ModelFit, RandomEffectsCov, ValidationError,
    D_MIN, TAU_SEL_DEFAULT,
};
use crate::mixed_effects::{update_d, update_sigma2, MixedEffectsError, RebSystem, SubjectPosterior};
use crate::numerics::Mat;
use crate::penalty::{
    penalty_derivative, penalty_value, scalar_prox, PenaltyError, PenaltyFamily, PenaltySpec,
};
use crate::robust_init::{
    pilot_fit, robust_location_scatter, PilotConfig, PilotEstimates, RobustInitError,
    RobustScatter, ScatterConfig,
};
use crate::weighting::{
    compute_weights, default_leverage_spec, default_residual_spec, discrepancy_factor,
    leverage_distances, standardized_residuals, WeightFnSpec, WeightState,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Estimator variants: the full method plus the benchmark baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full doubly adaptive robust fit.
    Darr,
    /// Weights pinned to 1, discrepancy factor skipped; same penalty.
    NonrobustPenalized,
    /// Full weighting, no penalty (lambda forced to 0).
    RobustUnpenalized,
    /// Unpenalized, unweighted fit restricted to a known support.
    OracleRestricted,
    /// Z ignored (b = 0, no D update), weights 1, Lasso penalty on pooled rows.
    MarginalLasso,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Darr => "darr",
            Variant::NonrobustPenalized => "nonrobust_penalized",
            Variant::RobustUnpenalized => "robust_unpenalized",
            Variant::OracleRestricted => "oracle_restricted",
            Variant::MarginalLasso => "marginal_lasso",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("outer loop hit the iteration cap before meeting the tolerance")]
    NotConverged(Box<ModelFit>),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Pilot(#[from] RobustInitError),
    #[error(transparent)]
    MixedEffects(#[from] MixedEffectsError),
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
}

/// Accepts a non-converged fit as a usable partial result.
pub fn recover_partial(result: Result<ModelFit, SolverError>) -> Result<ModelFit, SolverError> {
    match result {
        Err(SolverError::NotConverged(fit)) => Ok(*fit),
        other => other,
    }
}

/// Solver configuration. `leverage_weight` defaults per dataset dimension via
/// [`SolverConfig::for_dim`]; `oracle_support` is required exactly for the
/// oracle-restricted variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub penalty: PenaltySpec,
    pub outer_tol: f64,
    pub outer_max_iter: usize,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub lla_steps: usize,
    pub active_set: bool,
    pub residual_weight: WeightFnSpec,
    pub leverage_weight: WeightFnSpec,
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_support: Option<Vec<usize>>,
    pub seed: u64,
    pub tau_sel: f64,
    /// Diagnostic: pins the discrepancy factor instead of estimating it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_override: Option<f64>,
    pub pilot: PilotConfig,
    pub scatter: ScatterConfig,
}

impl SolverConfig {
    /// Defaults for a dataset with `p` fixed-effect columns.
    pub fn for_dim(penalty: PenaltySpec, p: usize) -> Self {
        SolverConfig {
            penalty,
            outer_tol: 1e-4,
            outer_max_iter: 50,
            inner_tol: 1e-7,
            inner_max_iter: 500,
            lla_steps: 2,
            active_set: true,
            residual_weight: default_residual_spec(),
            leverage_weight: default_leverage_spec(p),
            variant: Variant::Darr,
            oracle_support: None,
            seed: 0,
            tau_sel: TAU_SEL_DEFAULT,
            delta_override: None,
            pilot: PilotConfig::default(),
            scatter: ScatterConfig::default(),
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.penalty.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.outer_tol > 0.0 && self.inner_tol > 0.0) {
            return Err(SolverError::InvalidConfig(
                "tolerances must be positive".into(),
            ));
        }
        if self.outer_max_iter == 0 || self.inner_max_iter == 0 || self.lla_steps == 0 {
            return Err(SolverError::InvalidConfig(
                "iteration caps must be at least 1".into(),
            ));
        }
        self.penalty
            .validate()
            .map_err(|e| SolverError::InvalidConfig(e.to_string()))?;
        match (self.variant, &self.oracle_support) {
            (Variant::OracleRestricted, None) => Err(SolverError::InvalidConfig(
                "oracle_restricted requires oracle_support".into(),
            )),
            (v, Some(_)) if v != Variant::OracleRestricted => Err(SolverError::InvalidConfig(
                "oracle_support is only valid for the oracle_restricted variant".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Per-outer-iteration diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    /// Relative l2 change of beta (the termination criterion).
    pub rel_change: Vec<f64>,
    /// Weighted penalized objective at the iterate.
    pub objective: Vec<f64>,
    /// Discrepancy factor used in the iteration.
    pub delta: Vec<f64>,
    /// Number of exactly-zero observation weights.
    pub zero_weight_count: Vec<usize>,
}

impl ConvergenceTrace {
    pub fn len(&self) -> usize {
        self.rel_change.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rel_change.is_empty()
    }
}

/// Column-major copy of the stacked design for fast coordinate access.
pub(crate) struct ColumnDesign {
    n: usize,
    p: usize,
    cols: Vec<f64>,
}

impl ColumnDesign {
    pub(crate) fn new(dataset: &LongitudinalDataset) -> Self {
        let n = dataset.total_obs();
        let p = dataset.p;
        let mut cols = vec![0.0; n * p];
        let mut row = 0;
        for s in &dataset.subjects {
            for t in 0..s.n_obs() {
                let xr = s.x.row(t);
                for (j, &v) in xr.iter().enumerate() {
                    cols[j * n + row] = v;
                }
                row += 1;
            }
        }
        ColumnDesign { n, p, cols }
    }

    fn col(&self, j: usize) -> &[f64] {
        &self.cols[j * self.n..(j + 1) * self.n]
    }

    /// X beta using only the nonzero coefficients.
    fn x_beta(&self, beta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (j, &bj) in beta.iter().enumerate() {
            if bj == 0.0 {
                continue;
            }
            for (o, &x) in out.iter_mut().zip(self.col(j)) {
                *o += x * bj;
            }
        }
        out
    }
}

/// Outcome of one M-step.
pub struct MStepOutcome {
    pub beta: FixedEffects,
    pub sweeps: usize,
    /// Coordinate updates that fell back to the LLA tangent rule.
    pub lla_fallbacks: usize,
    /// Coordinates pinned to zero for lack of weighted information.
    pub zero_information: usize,
}

fn soft_threshold(s: f64, t: f64) -> f64 {
    s.signum() * (s.abs() - t).max(0.0)
}

#[allow(clippy::too_many_arguments)]
fn m_step_impl(
    design: &ColumnDesign,
    working_y: &[f64],
    w: &[f64],
    penalty: &PenaltySpec,
    beta_init: &FixedEffects,
    allowed: &[usize],
    lambda_multiplier: Option<&[f64]>,
    cfg: &SolverConfig,
) -> MStepOutcome {
    let n = design.n;
    assert_eq!(working_y.len(), n);
    assert_eq!(w.len(), n);
    assert_eq!(beta_init.len(), design.p);
    let n_f = n as f64;

    let mut beta = beta_init.beta.clone();
    // Zero out coordinates outside the allowed set.
    if allowed.len() != design.p {
        let allowed_set: std::collections::HashSet<usize> = allowed.iter().cloned().collect();
        for (j, b) in beta.iter_mut().enumerate() {
            if !allowed_set.contains(&j) {
                *b = 0.0;
            }
        }
    }

    // Weighted curvature per coordinate, fixed within the M-step.
    let mut a = vec![0.0; design.p];
    for &j in allowed {
        let col = design.col(j);
        let mut acc = 0.0;
        for (&x, &wi) in col.iter().zip(w) {
            acc += wi * x * x;
        }
        a[j] = acc;
    }

    // Residuals r = y* - X beta, maintained incrementally.
    let fitted = design.x_beta(&beta);
    let mut resid: Vec<f64> = working_y
        .iter()
        .zip(&fitted)
        .map(|(&y, &f)| y - f)
        .collect();

    let mut lla_used = vec![0usize; design.p];
    let mut lla_fallbacks = 0usize;
    let mut zero_information = 0usize;
    for &j in allowed {
        if a[j] <= 0.0 {
            if beta[j] != 0.0 {
                let bj = beta[j];
                for (r, &x) in resid.iter_mut().zip(design.col(j)) {
                    *r += x * bj;
                }
                beta[j] = 0.0;
            }
            zero_information += 1;
        }
    }

    let level_for = |j: usize| -> f64 {
        match lambda_multiplier {
            Some(m) => penalty.lambda * m[j],
            None => penalty.lambda,
        }
    };

    // Each coordinate solves min over beta_j of
    //   sum_it w (r - x beta_j)^2 + N p_lambda(|beta_j|),
    // which after dividing by N is the scalar rule at curvature z_j/N and
    // level lambda. The per-observation normalization keeps the concavity
    // regions on the coefficient scale, where the folded-concave penalties
    // stop shrinking strong signals.
    let update_coord = |j: usize,
                            beta: &mut [f64],
                            resid: &mut [f64],
                            lla_used: &mut [usize],
                            lla_fallbacks: &mut usize|
     -> f64 {
        let aj = a[j];
        if aj <= 0.0 {
            return 0.0;
        }
        let col = design.col(j);
        let mut g = 0.0;
        for ((&x, &wi), &r) in col.iter().zip(w).zip(resid.iter()) {
            g += wi * x * r;
        }
        let bj = g + aj * beta[j];
        let z_n = 2.0 * aj / n_f;
        let u = bj / aj;
        let new = match scalar_prox(z_n, u, level_for(j), penalty) {
            Ok(v) => v,
            Err(PenaltyError::NonconvexScalar { .. }) => {
                if lla_used[j] >= cfg.lla_steps {
                    return 0.0; // tangent budget spent; hold the coordinate
                }
                lla_used[j] += 1;
                *lla_fallbacks += 1;
                let eff_j = penalty.with_lambda(level_for(j));
                let tangent = penalty_derivative(&eff_j, beta[j].abs());
                soft_threshold(z_n * u, tangent) / z_n
            }
            Err(e) => panic!("unexpected penalty error: {e}"),
        };
        let change = (new - beta[j]).abs();
        if new != beta[j] {
            let d = new - beta[j];
            for (r, &x) in resid.iter_mut().zip(col) {
                *r -= x * d;
            }
            beta[j] = new;
        }
        change
    };

    #[cfg(debug_assertions)]
    let objective = |beta: &[f64], resid: &[f64]| -> f64 {
        let mut v = 0.0;
        for (&r, &wi) in resid.iter().zip(w) {
            v += wi * r * r;
        }
        for &j in allowed {
            let eff_j = penalty.with_lambda(level_for(j));
            v += n_f * penalty_value(&eff_j, beta[j].abs());
        }
        v
    };
    #[cfg(debug_assertions)]
    let mut prev_obj = objective(&beta, &resid);

    let mut sweeps = 0usize;
    loop {
        // Full sweep: updates every allowed coordinate and doubles as the
        // violation check for the active-set strategy.
        let mut max_change = 0.0f64;
        for &j in allowed {
            max_change = max_change.max(update_coord(
                j,
                &mut beta,
                &mut resid,
                &mut lla_used,
                &mut lla_fallbacks,
            ));
        }
        sweeps += 1;
        #[cfg(debug_assertions)]
        {
            let obj = objective(&beta, &resid);
            debug_assert!(
                obj <= prev_obj + 1e-9 * (1.0 + prev_obj.abs()),
                "M-step objective increased: {prev_obj} -> {obj}"
            );
            prev_obj = obj;
        }
        if max_change <= cfg.inner_tol || sweeps >= cfg.inner_max_iter {
            break;
        }
        if !cfg.active_set {
            continue;
        }
        // Cycle the current active set to convergence, then loop back for a
        // full violation sweep.
        loop {
            let active: Vec<usize> = allowed
                .iter()
                .cloned()
                .filter(|&j| beta[j] != 0.0)
                .collect();
            if active.is_empty() {
                break;
            }
            let mut change = 0.0f64;
            for &j in &active {
                change = change.max(update_coord(
                    j,
                    &mut beta,
                    &mut resid,
                    &mut lla_used,
                    &mut lla_fallbacks,
                ));
            }
            sweeps += 1;
            #[cfg(debug_assertions)]
            {
                let obj = objective(&beta, &resid);
                debug_assert!(
                    obj <= prev_obj + 1e-9 * (1.0 + prev_obj.abs()),
                    "M-step objective increased in active cycle: {prev_obj} -> {obj}"
                );
                prev_obj = obj;
            }
            if change <= cfg.inner_tol || sweeps >= cfg.inner_max_iter {
                break;
            }
        }
        if sweeps >= cfg.inner_max_iter {
            break;
        }
    }

    MStepOutcome {
        beta: FixedEffects { beta },
        sweeps,
        lla_fallbacks,
        zero_information,
    }
}

/// Coordinate-descent M-step on the working responses with fixed weights.
///
/// Minimizes `sum_it w (y* - x'beta)^2 + N sum_j p_lambda(|beta_j|)` (the
/// adaptive-Lasso multiplier scales lambda per coordinate). Coordinates whose
/// scalar subproblem is non-convex fall back to an LLA tangent update, at
/// most `lla_steps` times each per M-step.
pub fn m_step(
    dataset: &LongitudinalDataset,
    working_y: &[f64],
    weights: &WeightState,
    penalty: &PenaltySpec,
    beta_init: &FixedEffects,
    cfg: &SolverConfig,
) -> MStepOutcome {
    let design = ColumnDesign::new(dataset);
    let allowed: Vec<usize> = (0..dataset.p).collect();
    let mult = adaptive_multiplier(penalty, dataset.p);
    m_step_impl(
        &design,
        working_y,
        &weights.weights,
        penalty,
        beta_init,
        &allowed,
        mult.as_deref(),
        cfg,
    )
}

fn adaptive_multiplier(penalty: &PenaltySpec, p: usize) -> Option<Vec<f64>> {
    if penalty.family == PenaltyFamily::AdaptiveLasso {
        let w = penalty
            .adaptive_weights
            .clone()
            .unwrap_or_else(|| vec![1.0; p]);
        assert_eq!(w.len(), p, "adaptive weights must have length p");
        Some(w)
    } else {
        None
    }
}

/// Warm-start state for the outer loop. The first standardization scale is
/// always re-derived robustly from the init's own residuals, so no scale is
/// carried here.
#[derive(Debug, Clone)]
pub struct FitInit {
    pub beta: FixedEffects,
    pub b: Vec<Vec<f64>>,
    pub d: RandomEffectsCov,
}

impl FitInit {
    pub fn from_pilot(pilot: &PilotEstimates) -> Self {
        FitInit {
            beta: pilot.beta.clone(),
            b: pilot.b.clone(),
            d: pilot.d0.clone(),
        }
    }

    /// Coefficient-only warm start: random effects and covariance restart
    /// from the pilot. Carrying a previous fit's (b, D) across penalty levels
    /// can smuggle absorbed outliers past the residual screen, so only beta
    /// survives.
    pub fn warm_beta(fit: &ModelFit, pilot: &PilotEstimates) -> Self {
        FitInit {
            beta: fit.beta.clone(),
            b: pilot.b.clone(),
            d: pilot.d0.clone(),
        }
    }
}

/// Dataset-level quantities shared across fits: the pilot, the robust
/// scatter of the pooled covariate rows, the cached leverage distances, and a
/// column-major design copy.
pub struct FitPreparation {
    pub pilot: PilotEstimates,
    pub scatter: RobustScatter,
    pub leverage: Vec<f64>,
    pub(crate) design: ColumnDesign,
}

/// Computes the pilot fit and robust scatter for a dataset.
pub fn prepare(
    dataset: &LongitudinalDataset,
    cfg: &SolverConfig,
) -> Result<FitPreparation, SolverError> {
    let pilot = pilot_fit(dataset, &cfg.pilot)?;
    let scatter_cfg = ScatterConfig {
        seed: cfg.seed,
        ..cfg.scatter.clone()
    };
    let scatter = robust_location_scatter(&dataset.stack_x_rows(), &scatter_cfg)?;
    let leverage = leverage_distances(dataset, &scatter);
    let design = ColumnDesign::new(dataset);
    Ok(FitPreparation {
        pilot,
        scatter,
        leverage,
        design,
    })
}

struct VariantPlan {
    weights_pinned: bool,
    ignore_z: bool,
    penalty: PenaltySpec,
    allowed: Vec<usize>,
}

fn variant_plan(
    dataset: &LongitudinalDataset,
    prep: &FitPreparation,
    cfg: &SolverConfig,
) -> VariantPlan {
    let all: Vec<usize> = (0..dataset.p).collect();
    match cfg.variant {
        Variant::Darr => {
            let mut penalty = cfg.penalty.clone();
            if penalty.family == PenaltyFamily::AdaptiveLasso && penalty.adaptive_weights.is_none()
            {
                penalty.adaptive_weights = Some(PenaltySpec::default_adaptive_weights(
                    &prep.pilot.beta.beta,
                ));
            }
            VariantPlan {
                weights_pinned: false,
                ignore_z: false,
                penalty,
                allowed: all,
            }
        }
        Variant::NonrobustPenalized => VariantPlan {
            weights_pinned: true,
            ignore_z: false,
            penalty: cfg.penalty.clone(),
            allowed: all,
        },
        Variant::RobustUnpenalized => VariantPlan {
            weights_pinned: false,
            ignore_z: false,
            penalty: cfg.penalty.with_lambda(0.0),
            allowed: all,
        },
        Variant::OracleRestricted => {
            let mut allowed = cfg.oracle_support.clone().unwrap_or_default();
            allowed.sort_unstable();
            allowed.dedup();
            VariantPlan {
                weights_pinned: true,
                ignore_z: false,
                penalty: cfg.penalty.with_lambda(0.0),
                allowed,
            }
        }
        Variant::MarginalLasso => VariantPlan {
            weights_pinned: true,
            ignore_z: true,
            penalty: PenaltySpec {
                family: PenaltyFamily::Lasso,
                lambda: cfg.penalty.lambda,
                gamma: 0.0,
                adaptive_weights: None,
            },
            allowed: all,
        },
    }
}

struct EStepState {
    weights: WeightState,
    posteriors: Vec<SubjectPosterior>,
    d_new: RandomEffectsCov,
    sigma2_new: f64,
    working_y: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn e_step(
    dataset: &LongitudinalDataset,
    prep: &FitPreparation,
    plan: &VariantPlan,
    cfg: &SolverConfig,
    beta: &FixedEffects,
    b: &[Vec<f64>],
    d: &RandomEffectsCov,
    sigma2: f64,
) -> Result<EStepState, SolverError> {
    let n_total = dataset.total_obs();
    let sigma = sigma2.sqrt().max(1e-12);
    let residuals = standardized_residuals(dataset, beta, b, sigma);
    let weights = if plan.weights_pinned {
        WeightState {
            weights: vec![1.0; n_total],
            residuals,
            leverage: prep.leverage.clone(),
            delta: 0.0,
        }
    } else {
        let delta = cfg
            .delta_override
            .unwrap_or_else(|| discrepancy_factor(&residuals));
        compute_weights(
            &residuals,
            &prep.leverage,
            delta,
            &cfg.residual_weight,
            &cfg.leverage_weight,
        )
    };

    let q = dataset.q;
    let (posteriors, d_new, sigma2_new) = if plan.ignore_z {
        let posteriors: Vec<SubjectPosterior> = dataset
            .subjects
            .iter()
            .map(|_| SubjectPosterior {
                b_hat: vec![0.0; q],
                v: Mat::zeros(q, q),
            })
            .collect();
        let sigma2_new = update_sigma2(dataset, beta, &posteriors, &weights);
        (posteriors, d.clone(), sigma2_new)
    } else {
        let mut posteriors = Vec::with_capacity(dataset.n_subjects());
        let mut offset = 0;
        for s in &dataset.subjects {
            let w_slice = &weights.weights[offset..offset + s.n_obs()];
            let system = RebSystem::new(s, w_slice, d)?;
            posteriors.push(system.posterior(beta));
            offset += s.n_obs();
        }
        let d_new = update_d(&posteriors);
        let sigma2_new = update_sigma2(dataset, beta, &posteriors, &weights);
        (posteriors, d_new, sigma2_new)
    };

    // Working responses with the refreshed random effects held fixed.
    let mut working_y = Vec::with_capacity(n_total);
    for (s, post) in dataset.subjects.iter().zip(&posteriors) {
        for t in 0..s.n_obs() {
            working_y.push(s.y[t] - crate::numerics::dot(s.z.row(t), &post.b_hat));
        }
    }

    Ok(EStepState {
        weights,
        posteriors,
        d_new,
        sigma2_new,
        working_y,
    })
}

/// Weighted penalized objective at (beta, b): the fit criterion recorded in
/// the trace.
fn eq4_objective(
    dataset: &LongitudinalDataset,
    design: &ColumnDesign,
    weights: &WeightState,
    plan: &VariantPlan,
    beta: &FixedEffects,
    b: &[Vec<f64>],
) -> f64 {
    let n_f = dataset.total_obs() as f64;
    let mult = adaptive_multiplier(&plan.penalty, dataset.p);
    let xb = design.x_beta(&beta.beta);
    let mut v = 0.0;
    let mut row = 0;
    for (s, bi) in dataset.subjects.iter().zip(b) {
        for t in 0..s.n_obs() {
            let e = s.y[t] - xb[row] - crate::numerics::dot(s.z.row(t), bi);
            v += weights.weights[row] * e * e;
            row += 1;
        }
    }
    for &j in &plan.allowed {
        let level = match &mult {
            Some(m) => plan.penalty.lambda * m[j],
            None => plan.penalty.lambda,
        };
        v += n_f * penalty_value(&plan.penalty.with_lambda(level), beta.beta[j].abs());
    }
    v
}

/// Full fit from scratch: validates, runs the pilot and scatter, then the
/// outer iteration.
pub fn fit(dataset: &LongitudinalDataset, cfg: &SolverConfig) -> Result<ModelFit, SolverError> {
    crate::data_model::validate(dataset)?;
    cfg.validate()?;
    let prep = prepare(dataset, cfg)?;
    fit_prepared(dataset, &prep, cfg, None)
}

/// Outer iteration with shared preparation and an optional warm start.
pub fn fit_prepared(
    dataset: &LongitudinalDataset,
    prep: &FitPreparation,
    cfg: &SolverConfig,
    init: Option<FitInit>,
) -> Result<ModelFit, SolverError> {
    cfg.validate()?;
    let plan = variant_plan(dataset, prep, cfg);
    let init = init.unwrap_or_else(|| FitInit::from_pilot(&prep.pilot));

    let mut beta = init.beta.clone();
    if beta.len() != dataset.p {
        return Err(SolverError::InvalidConfig(format!(
            "init beta has length {}, expected {}",
            beta.len(),
            dataset.p
        )));
    }
    if plan.allowed.len() != dataset.p {
        let allowed: std::collections::HashSet<usize> = plan.allowed.iter().cloned().collect();
        for (j, v) in beta.beta.iter_mut().enumerate() {
            if !allowed.contains(&j) {
                *v = 0.0;
            }
        }
    }
    let q = dataset.q;
    let mut b = if plan.ignore_z {
        vec![vec![0.0; q]; dataset.n_subjects()]
    } else {
        init.b.clone()
    };
    let mut d = init.d.floored(D_MIN);
    let mut sigma2 = init_sigma2(dataset, &prep.design, &init, cfg.pilot.scale_floor)
        .max(crate::mixed_effects::SIGMA2_FLOOR);

    let mult = adaptive_multiplier(&plan.penalty, dataset.p);
    let mut trace = ConvergenceTrace::default();
    let mut converged = false;
    let mut last_weights = WeightState::ones(dataset.total_obs());
    let mut b_fresh = b.clone();
    // The termination criterion watches beta only, which stabilizes long
    // before the variance components do. Once it fires, the variance
    // components are iterated to their own fixed point at fixed beta (E-steps
    // only), and one confirming full iteration must then still satisfy the
    // beta criterion.
    let mut polished = false;
    const VC_TOL: f64 = 1e-6;
    const VC_MAX_ITER: usize = 200;

    let mut iter = 0;
    while iter < cfg.outer_max_iter {
        iter += 1;
        let e = e_step(dataset, prep, &plan, cfg, &beta, &b, &d, sigma2)?;
        let outcome = m_step_impl(
            &prep.design,
            &e.working_y,
            &e.weights.weights,
            &plan.penalty,
            &beta,
            &plan.allowed,
            mult.as_deref(),
            cfg,
        );
        let beta_new = outcome.beta;

        // Random effects re-solved at the new beta (right-hand side only).
        b_fresh = if plan.ignore_z {
            b.clone()
        } else {
            let mut fresh = Vec::with_capacity(dataset.n_subjects());
            let mut offset = 0;
            for s in &dataset.subjects {
                let w_slice = &e.weights.weights[offset..offset + s.n_obs()];
                let sys = RebSystem::new(s, w_slice, &d)?;
                fresh.push(sys.posterior(&beta_new).b_hat);
                offset += s.n_obs();
            }
            fresh
        };

        let diff: Vec<f64> = beta_new
            .beta
            .iter()
            .zip(&beta.beta)
            .map(|(&a, &b)| a - b)
            .collect();
        let rel = crate::numerics::norm2(&diff) / crate::numerics::norm2(&beta.beta).max(1.0);
        let objective = eq4_objective(dataset, &prep.design, &e.weights, &plan, &beta_new, &b_fresh);
        trace.rel_change.push(rel);
        trace.objective.push(objective);
        trace.delta.push(e.weights.delta);
        trace.zero_weight_count.push(e.weights.zero_weight_count());

        beta = beta_new;
        b = e.posteriors.iter().map(|p| p.b_hat.clone()).collect();
        d = e.d_new;
        sigma2 = e.sigma2_new;
        last_weights = e.weights;

        if rel <= cfg.outer_tol {
            if polished || plan.ignore_z {
                converged = true;
                break;
            }
            // Variance-component polish at fixed beta.
            for _ in 0..VC_MAX_ITER {
                let ep = e_step(dataset, prep, &plan, cfg, &beta, &b, &d, sigma2)?;
                let d_rel = ep.d_new.matrix().sub(d.matrix()).frobenius_norm()
                    / d.matrix().frobenius_norm().max(1e-12);
                let s_rel = (ep.sigma2_new - sigma2).abs() / sigma2.max(1e-12);
                b = ep.posteriors.iter().map(|p| p.b_hat.clone()).collect();
                d = ep.d_new;
                sigma2 = ep.sigma2_new;
                last_weights = ep.weights;
                if d_rel <= VC_TOL && s_rel <= VC_TOL {
                    break;
                }
            }
            polished = true;
            if iter >= cfg.outer_max_iter {
                // No budget left for the confirming iteration; the beta
                // criterion was met and the components are at their fixed
                // point, so terminate normally.
                b_fresh = b.clone();
                converged = true;
                break;
            }
            // Loop continues: the next full iteration confirms (or revises)
            // beta under the polished variance components.
        } else {
            polished = false;
        }
    }

    let support = support(&beta, cfg.tau_sel);
    let fit = ModelFit {
        beta,
        b_hat: b_fresh,
        d_hat: d,
        sigma2_hat: sigma2,
        weights: last_weights,
        support,
        trace: trace.clone(),
        iterations: trace.len(),
        tau_sel: cfg.tau_sel,
        variant: cfg.variant,
        lambda: plan.penalty.lambda,
        converged,
    };
    if converged {
        Ok(fit)
    } else {
        Err(SolverError::NotConverged(Box::new(fit)))
    }
}

/// Warm-start state for the top of a penalty path: zero coefficients, pilot
/// random effects, and a residual scale estimated from that state's own
/// residuals (the pilot scale would be far too small for the empty model,
/// which would blow up the discrepancy factor and zero out the weights).
pub fn zero_init(
    dataset: &LongitudinalDataset,
    prep: &FitPreparation,
    cfg: &SolverConfig,
) -> FitInit {
    let plan = variant_plan(dataset, prep, cfg);
    let b0 = if plan.ignore_z {
        vec![vec![0.0; dataset.q]; dataset.n_subjects()]
    } else {
        prep.pilot.b.clone()
    };
    FitInit {
        beta: FixedEffects::zeros(dataset.p),
        b: b0,
        d: prep.pilot.d0.clone(),
    }
}

/// Robust scale of the residuals at an init state, squared; this seeds the
/// first standardization so the empty or warm model is judged against its own
/// residual scale rather than the pilot's.
fn init_sigma2(
    dataset: &LongitudinalDataset,
    design: &ColumnDesign,
    init: &FitInit,
    scale_floor: f64,
) -> f64 {
    let xb = design.x_beta(&init.beta.beta);
    let mut resid = Vec::with_capacity(dataset.total_obs());
    let mut row = 0;
    for (s, bi) in dataset.subjects.iter().zip(&init.b) {
        for t in 0..s.n_obs() {
            resid.push(s.y[t] - xb[row] - crate::numerics::dot(s.z.row(t), bi));
            row += 1;
        }
    }
    let scale = (crate::numerics::MAD_NORMAL_CONSISTENCY * crate::numerics::mad(&resid))
        .max(scale_floor);
    scale * scale
}

/// The smallest penalty level at which the first M-step keeps beta at zero,
/// computed from the first E-step state at beta = 0.
pub fn lambda_max(
    dataset: &LongitudinalDataset,
    prep: &FitPreparation,
    cfg: &SolverConfig,
) -> Result<f64, SolverError> {
    let plan = variant_plan(dataset, prep, cfg);
    let init = zero_init(dataset, prep, cfg);
    let d0 = init.d.floored(D_MIN);
    let sigma2_0 = init_sigma2(dataset, &prep.design, &init, cfg.pilot.scale_floor);
    let e = e_step(dataset, prep, &plan, cfg, &init.beta, &init.b, &d0, sigma2_0)?;
    let n_f = dataset.total_obs() as f64;
    let mult = adaptive_multiplier(&plan.penalty, dataset.p);
    let mut worst = 0.0f64;
    for &j in &plan.allowed {
        let col = prep.design.col(j);
        let mut bj = 0.0;
        for ((&x, &w), &y) in col.iter().zip(&e.weights.weights).zip(&e.working_y) {
            bj += w * x * y;
        }
        // s_j = 2 b_j at beta = 0; zero iff |s_j| <= N lambda m_j.
        let m = mult.as_ref().map_or(1.0, |m| m[j].max(1e-12));
        worst = worst.max(2.0 * bj.abs() / (n_f * m));
    }
    Ok(worst)
}

/// Geometric grid from lambda_max down three decades.
pub fn lambda_grid(lambda_max: f64, n_lambda: usize) -> Vec<f64> {
    assert!(n_lambda >= 2, "need at least two grid points");
    let ratio: f64 = 1e-3;
    (0..n_lambda)
        .map(|i| lambda_max * ratio.powf(i as f64 / (n_lambda - 1) as f64))
        .collect()
}

/// Warm-started fits down a penalty grid. Non-converged entries are kept as
/// partial fits (flagged by `converged`) so path consumers can continue.
pub fn lambda_path(
    dataset: &LongitudinalDataset,
    cfg: &SolverConfig,
    n_lambda: usize,
) -> Result<Vec<(f64, ModelFit)>, SolverError> {
    crate::data_model::validate(dataset)?;
    cfg.validate()?;
    let prep = prepare(dataset, cfg)?;
    let lmax = lambda_max(dataset, &prep, cfg)?;
    lambda_path_prepared(dataset, &prep, cfg, &lambda_grid(lmax, n_lambda))
}

/// Warm-started fits over an explicit grid with shared preparation.
pub fn lambda_path_prepared(
    dataset: &LongitudinalDataset,
    prep: &FitPreparation,
    cfg: &SolverConfig,
    grid: &[f64],
) -> Result<Vec<(f64, ModelFit)>, SolverError> {
    let mut out = Vec::with_capacity(grid.len());
    let mut warm: Option<FitInit> = None;
    for (i, &lambda) in grid.iter().enumerate() {
        let step_cfg = cfg.clone().with_lambda(lambda);
        let init = match &warm {
            Some(w) => Some(w.clone()),
            None if i == 0 => {
                // At lambda_max the first M-step must return zero, and with a
                // zero start the relative-change criterion fires immediately.
                Some(zero_init(dataset, prep, cfg))
            }
            None => None,
        };
        let fit = recover_partial(fit_prepared(dataset, prep, &step_cfg, init))?;
        warm = Some(FitInit::warm_beta(&fit, &prep.pilot));
        out.push((lambda, fit));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::SubjectBlock;
    use crate::numerics::RngStream;
    use crate::simulation::{default_beta_star, generate, DgpConfig};

    fn small_dataset(seed: u64, n: usize, t: usize, p: usize) -> LongitudinalDataset {
        let mut rng = RngStream::new(seed, 0);
        let subjects = (0..n)
            .map(|i| {
                let x = Mat::from_rows(
                    &(0..t)
                        .map(|_| (0..p).map(|_| rng.normal()).collect())
                        .collect::<Vec<_>>(),
                );
                let z = Mat::from_rows(
                    &(1..=t)
                        .map(|k| vec![1.0, k as f64 / 5.0])
                        .collect::<Vec<_>>(),
                );
                SubjectBlock {
                    id: format!("s{i}"),
                    times: (1..=t).map(|k| k as f64).collect(),
                    y: (0..t).map(|_| rng.normal()).collect(),
                    x,
                    z,
                }
            })
            .collect();
        LongitudinalDataset { subjects, p, q: 2 }
    }

    fn flat_y(data: &LongitudinalDataset) -> Vec<f64> {
        data.subjects.iter().flat_map(|s| s.y.clone()).collect()
    }

    #[test]
    fn m_step_full_shrinkage_at_large_lambda() {
        let data = small_dataset(1, 8, 5, 6);
        let y = flat_y(&data);
        let w = WeightState::ones(data.total_obs());
        let penalty = PenaltySpec::mcp(100.0, 3.0).unwrap();
        let cfg = SolverConfig::for_dim(penalty.clone(), 6);
        let out = m_step(&data, &y, &w, &penalty, &FixedEffects::zeros(6), &cfg);
        assert!(out.beta.beta.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn m_step_single_coordinate_weighted_least_squares() {
        let data = small_dataset(2, 10, 4, 1);
        let y = flat_y(&data);
        let mut rng = RngStream::new(3, 0);
        let wvec: Vec<f64> = (0..data.total_obs()).map(|_| rng.uniform()).collect();
        let w = WeightState {
            weights: wvec.clone(),
            residuals: vec![0.0; data.total_obs()],
            leverage: vec![0.0; data.total_obs()],
            delta: 0.0,
        };
        let penalty = PenaltySpec::lasso(0.0).unwrap();
        let cfg = SolverConfig::for_dim(penalty.clone(), 1);
        let out = m_step(&data, &y, &w, &penalty, &FixedEffects::zeros(1), &cfg);
        let x = data.stack_x_rows();
        let mut num = 0.0;
        let mut den = 0.0;
        for r in 0..data.total_obs() {
            num += wvec[r] * x[(r, 0)] * y[r];
            den += wvec[r] * x[(r, 0)] * x[(r, 0)];
        }
        assert!((out.beta.beta[0] - num / den).abs() < 1e-9);
    }

    /// Exhaustive grid minimum of the M-step objective
    /// `sum w (y - x beta)^2 + N sum_j p_lambda(|beta_j|)`
    /// by nested partial sums.
    pub(crate) fn grid_minimum(
        x: &Mat,
        y: &[f64],
        w: &[f64],
        penalty: &PenaltySpec,
        lo: f64,
        hi: f64,
        points: usize,
    ) -> f64 {
        let n = x.nrows();
        let p = x.ncols();
        let n_f = n as f64;
        let grid: Vec<f64> = (0..points)
            .map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64)
            .collect();
        #[allow(clippy::too_many_arguments)]
        fn recurse(
            x: &Mat,
            w: &[f64],
            grid: &[f64],
            penalty: &PenaltySpec,
            n_f: f64,
            level: usize,
            p: usize,
            resid: &[f64],
            pen_acc: f64,
            best: &mut f64,
        ) {
            if level == p {
                let mut v = pen_acc;
                for (r, &wi) in resid.iter().zip(w) {
                    v += wi * r * r;
                }
                if v < *best {
                    *best = v;
                }
                return;
            }
            for &g in grid {
                let next: Vec<f64> = resid
                    .iter()
                    .enumerate()
                    .map(|(r, &v)| v - x[(r, level)] * g)
                    .collect();
                let pen = pen_acc + n_f * crate::penalty::penalty_value(penalty, g.abs());
                recurse(x, w, grid, penalty, n_f, level + 1, p, &next, pen, best);
            }
        }
        let mut best = f64::INFINITY;
        recurse(x, w, &grid, penalty, n_f, 0, p, y, 0.0, &mut best);
        best
    }

    #[test]
    fn m_step_beats_grid_on_small_problems() {
        let mut rng = RngStream::new(4, 0);
        for trial in 0..5 {
            let n = 10 + rng.below(10);
            let p = 2 + rng.below(3); // 2..4
            let data = small_dataset(100 + trial, n / 2, 2, p);
            let y = flat_y(&data);
            let w = WeightState::ones(data.total_obs());
            let penalty = PenaltySpec::mcp(0.02 + 0.05 * rng.uniform(), 3.0).unwrap();
            let cfg = SolverConfig::for_dim(penalty.clone(), p);
            let out = m_step(&data, &y, &w, &penalty, &FixedEffects::zeros(p), &cfg);
            let x = data.stack_x_rows();
            let n_f = data.total_obs() as f64;
            let mut got = 0.0;
            for r in 0..data.total_obs() {
                let e = y[r] - crate::numerics::dot(x.row(r), &out.beta.beta);
                got += e * e;
            }
            for j in 0..p {
                got += n_f * crate::penalty::penalty_value(&penalty, out.beta.beta[j].abs());
            }
            let grid_best = grid_minimum(&x, &y, &w.weights, &penalty, -2.0, 2.0, 41);
            assert!(
                got <= grid_best + 1e-6,
                "trial {trial}: cd objective {got} vs grid minimum {grid_best}"
            );
        }
    }

    #[test]
    fn oracle_restricted_interpolates_noiseless_data() {
        let cfg_dgp = DgpConfig {
            n: 20,
            p: 12,
            s: 4,
            beta_star: default_beta_star(12, 4),
            sigma_eps: 0.0,
            d_star: crate::data_model::RandomEffectsCov::diagonal(&[0.0, 0.0]),
            seed: 5,
            ..DgpConfig::default()
        };
        let (data, truth) = generate(&cfg_dgp);
        let mut cfg = SolverConfig::for_dim(PenaltySpec::scad(0.1, 3.7).unwrap(), 12)
            .with_variant(Variant::OracleRestricted);
        cfg.inner_tol = 1e-9;
        cfg.outer_tol = 1e-8;
        cfg.oracle_support = Some(truth.support.clone());
        let fit = recover_partial(fit(&data, &cfg)).unwrap();
        for &j in &truth.support {
            assert!(
                (fit.beta.beta[j] - truth.beta_star[j]).abs() < 1e-6,
                "coordinate {j}: {} vs {}",
                fit.beta.beta[j],
                truth.beta_star[j]
            );
        }
        for j in 0..12 {
            if !truth.support.contains(&j) {
                assert_eq!(fit.beta.beta[j], 0.0);
            }
        }
    }

    #[test]
    fn determinism_same_seed_same_fit() {
        let (data, _) = generate(&DgpConfig {
            n: 20,
            p: 15,
            s: 3,
            beta_star: default_beta_star(15, 3),
            seed: 6,
            ..DgpConfig::default()
        });
        let cfg = SolverConfig::for_dim(PenaltySpec::scad(0.08, 3.7).unwrap(), 15);
        let a = recover_partial(fit(&data, &cfg)).unwrap();
        let b = recover_partial(fit(&data, &cfg)).unwrap();
        assert_eq!(a.beta.beta, b.beta.beta);
        assert_eq!(a.sigma2_hat, b.sigma2_hat);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn nonrobust_equals_darr_with_delta_pinned_to_zero() {
        let (data, truth) = generate(&DgpConfig {
            n: 25,
            p: 10,
            s: 3,
            beta_star: default_beta_star(10, 3),
            seed: 7,
            ..DgpConfig::default()
        });
        let _ = truth;
        let base = SolverConfig::for_dim(PenaltySpec::mcp(0.05, 3.0).unwrap(), 10);
        let pinned = {
            let mut c = base.clone();
            c.delta_override = Some(0.0);
            recover_partial(fit(&data, &c)).unwrap()
        };
        let nonrobust = recover_partial(
            fit(&data, &base.clone().with_variant(Variant::NonrobustPenalized)),
        )
        .unwrap();
        for j in 0..10 {
            assert!(
                (pinned.beta.beta[j] - nonrobust.beta.beta[j]).abs() <= 1e-10,
                "coordinate {j} differs"
            );
        }
    }

    #[test]
    fn gradient_of_smooth_part_matches_finite_differences() {
        let (data, _) = generate(&DgpConfig {
            n: 15,
            p: 8,
            s: 3,
            beta_star: default_beta_star(8, 3),
            seed: 8,
            ..DgpConfig::default()
        });
        let cfg = SolverConfig::for_dim(PenaltySpec::mcp(0.05, 3.0).unwrap(), 8);
        let fit = recover_partial(fit(&data, &cfg)).unwrap();
        // Smooth part with the fit's final weights and random effects.
        let mut ystar = Vec::new();
        for (s, bi) in data.subjects.iter().zip(&fit.b_hat) {
            for t in 0..s.n_obs() {
                ystar.push(s.y[t] - crate::numerics::dot(s.z.row(t), bi));
            }
        }
        let x = data.stack_x_rows();
        let w = &fit.weights.weights;
        let smooth = |beta: &[f64]| -> f64 {
            let mut v = 0.0;
            for r in 0..data.total_obs() {
                let e = ystar[r] - crate::numerics::dot(x.row(r), beta);
                v += w[r] * e * e;
            }
            v
        };
        for &j in &fit.support {
            let mut grad = 0.0;
            for r in 0..data.total_obs() {
                let e = ystar[r] - crate::numerics::dot(x.row(r), &fit.beta.beta);
                grad += -2.0 * w[r] * x[(r, j)] * e;
            }
            let h = 1e-6 * (1.0 + fit.beta.beta[j].abs());
            let mut plus = fit.beta.beta.clone();
            plus[j] += h;
            let mut minus = fit.beta.beta.clone();
            minus[j] -= h;
            let fd = (smooth(&plus) - smooth(&minus)) / (2.0 * h);
            let denom = grad.abs().max(fd.abs()).max(1e-8);
            assert!(
                (grad - fd).abs() / denom < 1e-4,
                "coordinate {j}: analytic {grad} vs fd {fd}"
            );
        }
    }

    #[test]
    fn lambda_path_starts_at_zero_and_has_requested_length() {
        let (data, _) = generate(&DgpConfig {
            n: 20,
            p: 12,
            s: 3,
            beta_star: default_beta_star(12, 3),
            seed: 9,
            ..DgpConfig::default()
        });
        let cfg = SolverConfig::for_dim(PenaltySpec::scad(0.1, 3.7).unwrap(), 12);
        let path = lambda_path(&data, &cfg, 8).unwrap();
        assert_eq!(path.len(), 8);
        assert!(path[0].1.beta.beta.iter().all(|&b| b == 0.0));
        for w in path.windows(2) {
            assert!(w[0].0 > w[1].0, "grid must be decreasing");
        }
    }

    #[test]
    fn config_validation_rules() {
        let base = SolverConfig::for_dim(PenaltySpec::lasso(0.1).unwrap(), 4);
        assert!(base.validate().is_ok());
        let mut needs_support = base.clone().with_variant(Variant::OracleRestricted);
        assert!(needs_support.validate().is_err());
        needs_support.oracle_support = Some(vec![0, 1]);
        assert!(needs_support.validate().is_ok());
        let mut stray = base.clone();
        stray.oracle_support = Some(vec![0]);
        assert!(stray.validate().is_err());
    }

    #[test]
    fn marginal_lasso_ignores_random_effects() {
        let (data, _) = generate(&DgpConfig {
            n: 20,
            p: 10,
            s: 3,
            beta_star: default_beta_star(10, 3),
            seed: 10,
            ..DgpConfig::default()
        });
        let cfg = SolverConfig::for_dim(PenaltySpec::mcp(0.1, 3.0).unwrap(), 10)
            .with_variant(Variant::MarginalLasso);
        let fit = recover_partial(fit(&data, &cfg)).unwrap();
        assert!(fit.b_hat.iter().all(|b| b.iter().all(|&v| v == 0.0)));
        // D stays at its init.
        assert_eq!(fit.d_hat.matrix(), RandomEffectsCov::identity(2).matrix());
        assert_eq!(fit.lambda, 0.1);
    }
}
