//! Folded-concave and convex penalty families, their derivatives for local
//! linear approximation, and the exact scalar thresholding updates used by the
//! coordinate-descent M-step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyFamily {
    Mcp,
    Scad,
    Lasso,
    AdaptiveLasso,
}

/// Customary concavity defaults: gamma = 3 for MCP, a = 3.7 for SCAD.
pub const MCP_GAMMA_DEFAULT: f64 = 3.0;
pub const SCAD_A_DEFAULT: f64 = 3.7;

/// A penalty specification. For SCAD the `gamma` field stores the parameter
/// usually written `a`. For the adaptive Lasso the per-coordinate weights
/// default to 1/(|pilot beta_j| + 1e-6) and are applied by the solver, which
/// rescales the level per coordinate before calling the scalar rules here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub family: PenaltyFamily,
    pub lambda: f64,
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptive_weights: Option<Vec<f64>>,
}

#[derive(Debug, Error)]
pub enum PenaltyError {
    #[error("invalid penalty parameters: {0}")]
    InvalidSpec(String),
    #[error("scalar subproblem is non-convex: curvature z = {z} <= concavity bound {bound}")]
    NonconvexScalar { z: f64, bound: f64 },
}

impl PenaltySpec {
    pub fn mcp(lambda: f64, gamma: f64) -> Result<Self, PenaltyError> {
        let spec = PenaltySpec {
            family: PenaltyFamily::Mcp,
            lambda,
            gamma,
            adaptive_weights: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn scad(lambda: f64, a: f64) -> Result<Self, PenaltyError> {
        let spec = PenaltySpec {
            family: PenaltyFamily::Scad,
            lambda,
            gamma: a,
            adaptive_weights: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn lasso(lambda: f64) -> Result<Self, PenaltyError> {
        let spec = PenaltySpec {
            family: PenaltyFamily::Lasso,
            lambda,
            gamma: 0.0,
            adaptive_weights: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn adaptive_lasso(lambda: f64, weights: Vec<f64>) -> Result<Self, PenaltyError> {
        let spec = PenaltySpec {
            family: PenaltyFamily::AdaptiveLasso,
            lambda,
            gamma: 0.0,
            adaptive_weights: Some(weights),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), PenaltyError> {
        if !(self.lambda >= 0.0) {
            return Err(PenaltyError::InvalidSpec(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        match self.family {
            PenaltyFamily::Mcp if !(self.gamma > 1.0) => Err(PenaltyError::InvalidSpec(format!(
                "MCP requires gamma > 1, got {}",
                self.gamma
            ))),
            PenaltyFamily::Scad if !(self.gamma > 2.0) => Err(PenaltyError::InvalidSpec(format!(
                "SCAD requires a > 2, got {}",
                self.gamma
            ))),
            _ => {
                if let Some(w) = &self.adaptive_weights {
                    if w.iter().any(|&v| !(v >= 0.0)) {
                        return Err(PenaltyError::InvalidSpec(
                            "adaptive weights must be nonnegative".to_string(),
                        ));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn with_lambda(&self, lambda: f64) -> PenaltySpec {
        PenaltySpec {
            lambda,
            ..self.clone()
        }
    }

    /// Default adaptive-Lasso weights from a pilot coefficient vector.
    pub fn default_adaptive_weights(pilot_beta: &[f64]) -> Vec<f64> {
        pilot_beta.iter().map(|&b| 1.0 / (b.abs() + 1e-6)).collect()
    }
}

/// Penalty value p_lambda(t) for t >= 0. Continuous and non-decreasing, 0 at 0.
pub fn penalty_value(spec: &PenaltySpec, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    let lam = spec.lambda;
    match spec.family {
        PenaltyFamily::Mcp => {
            let g = spec.gamma;
            if t <= g * lam {
                lam * t - t * t / (2.0 * g)
            } else {
                0.5 * g * lam * lam
            }
        }
        PenaltyFamily::Scad => {
            let a = spec.gamma;
            if t <= lam {
                lam * t
            } else if t <= a * lam {
                (2.0 * a * lam * t - t * t - lam * lam) / (2.0 * (a - 1.0))
            } else {
                lam * lam * (a + 1.0) / 2.0
            }
        }
        PenaltyFamily::Lasso | PenaltyFamily::AdaptiveLasso => lam * t,
    }
}

/// Right derivative p'_lambda(t) for t >= 0; used as the LLA weight. The value
/// at 0 is lambda, and it vanishes beyond the unbiasedness region for MCP/SCAD.
pub fn penalty_derivative(spec: &PenaltySpec, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    let lam = spec.lambda;
    match spec.family {
        PenaltyFamily::Mcp => (lam - t / spec.gamma).max(0.0),
        PenaltyFamily::Scad => {
            let a = spec.gamma;
            if t <= lam {
                lam
            } else {
                (a * lam - t).max(0.0) / (a - 1.0)
            }
        }
        PenaltyFamily::Lasso | PenaltyFamily::AdaptiveLasso => lam,
    }
}

fn soft_threshold(s: f64, threshold: f64) -> f64 {
    s.signum() * (s.abs() - threshold).max(0.0)
}

/// Exact minimizer of the scalar coordinate subproblem
///
/// ```text
/// (1/2) z (beta - u)^2 + P(|beta|)
/// ```
///
/// where `P` is the configured family evaluated at the effective level
/// `nlambda` (the caller has already folded the sample-size factor into it;
/// `spec.lambda` is ignored here). For MCP, with score s = z u:
///
/// - 0 when |s| <= nlambda
/// - sign(s)(|s| - nlambda)/(z - 1/gamma) when nlambda < |s| <= gamma nlambda z
/// - s/z beyond that (the unbiased region)
///
/// SCAD follows the analogous three-region rule; Lasso is the soft threshold.
///
/// Returns `NonconvexScalar` when the curvature precondition fails
/// (z <= 1/gamma for MCP, z <= 1/(a-1) for SCAD): the piecewise rule is not a
/// minimizer there and callers fall back to an LLA update.
pub fn scalar_prox(z: f64, u: f64, nlambda: f64, spec: &PenaltySpec) -> Result<f64, PenaltyError> {
    assert!(z > 0.0, "scalar_prox requires positive curvature");
    debug_assert!(nlambda >= 0.0);
    let s = z * u;
    match spec.family {
        PenaltyFamily::Lasso | PenaltyFamily::AdaptiveLasso => Ok(soft_threshold(s, nlambda) / z),
        PenaltyFamily::Mcp => {
            let g = spec.gamma;
            if z - 1.0 / g <= 0.0 {
                return Err(PenaltyError::NonconvexScalar { z, bound: 1.0 / g });
            }
            if s.abs() <= nlambda {
                Ok(0.0)
            } else if s.abs() <= g * nlambda * z {
                Ok(s.signum() * (s.abs() - nlambda) / (z - 1.0 / g))
            } else {
                Ok(s / z)
            }
        }
        PenaltyFamily::Scad => {
            let a = spec.gamma;
            if z - 1.0 / (a - 1.0) <= 0.0 {
                return Err(PenaltyError::NonconvexScalar {
                    z,
                    bound: 1.0 / (a - 1.0),
                });
            }
            if s.abs() <= nlambda * (z + 1.0) {
                Ok(soft_threshold(s, nlambda) / z)
            } else if s.abs() <= a * nlambda * z {
                Ok(s.signum() * (s.abs() - a * nlambda / (a - 1.0)) / (z - 1.0 / (a - 1.0)))
            } else {
                Ok(s / z)
            }
        }
    }
}

/// Objective of the scalar subproblem solved by [`scalar_prox`], with the
/// penalty evaluated at the effective level `nlambda`.
pub fn scalar_objective(z: f64, u: f64, nlambda: f64, spec: &PenaltySpec, beta: f64) -> f64 {
    let eff = spec.with_lambda(nlambda);
    0.5 * z * (beta - u) * (beta - u) + penalty_value(&eff, beta.abs())
}
