//! Doubly adaptive observation weights.
//!
//! Each observation gets a weight in [0, 1] built from two non-increasing
//! factors: one in the standardized residual (response outlyingness) and one
//! in a robust Mahalanobis distance of the fixed-effect covariates (leverage).
//! A global discrepancy factor — the Kolmogorov-Smirnov distance between the
//! empirical distribution of absolute standardized residuals and the
//! half-normal reference — scales both arguments, so downweighting is gentle
//! on clean data and aggressive under contamination.

use crate::data_model::{FixedEffects, LongitudinalDataset};
use crate::numerics::{chi2_quantile, half_normal_cdf};
use crate::robust_init::RobustScatter;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFamily {
    Huber,
    Bisquare,
}

/// A weight function family plus its cutoff constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightFnSpec {
    pub family: WeightFamily,
    pub cutoff: f64,
}

impl WeightFnSpec {
    pub fn huber(cutoff: f64) -> Self {
        assert!(cutoff > 0.0, "weight cutoff must be positive");
        WeightFnSpec {
            family: WeightFamily::Huber,
            cutoff,
        }
    }

    pub fn bisquare(cutoff: f64) -> Self {
        assert!(cutoff > 0.0, "weight cutoff must be positive");
        WeightFnSpec {
            family: WeightFamily::Bisquare,
            cutoff,
        }
    }
}

/// Classical 95%-efficiency Huber constant, reused as the residual cutoff.
pub const HUBER_C_DEFAULT: f64 = 1.345;

/// Default residual weight: Tukey bisquare with c = 1.345.
///
/// The residual factor must redescend to exactly zero: under contamination
/// the discrepancy factor sits near the contaminated fraction, so a Huber
/// factor leaves gross outliers with weights around c/(delta |r|) — large
/// enough that the moment update of the residual variance absorbs them,
/// standardized residuals deflate, and the downweighting switches itself off.
/// The bisquare factor at the same cutoff annihilates them instead, and on
/// clean data (delta near zero) its weights still sit at 1 - O(delta^2).
pub fn default_residual_spec() -> WeightFnSpec {
    WeightFnSpec::bisquare(HUBER_C_DEFAULT)
}

/// Default leverage weight: Tukey bisquare with the chi-square 0.99 quantile
/// at p degrees of freedom as cutoff, applied to the raw distance d^2.
///
/// Because huber and bisquare satisfy phi(u; c) = phi(ku; kc), this is
/// identical to feeding the dimension-normalized score d^2/p with cutoff
/// chi2_{0.99}(p)/p: for N(0, I) covariates d^2/p concentrates near 1, so the
/// cutoff is dimension-stable.
pub fn default_leverage_spec(p: usize) -> WeightFnSpec {
    let q = chi2_quantile(0.99, p.max(1)).expect("0.99 quantile is in-domain");
    WeightFnSpec::bisquare(q)
}

/// Per-observation weights with the scores they were built from, flattened in
/// subject order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightState {
    /// w_it in [0, 1].
    pub weights: Vec<f64>,
    /// Standardized residuals r_it.
    pub residuals: Vec<f64>,
    /// Robust squared Mahalanobis distances d^2(X_it) (>= 0).
    pub leverage: Vec<f64>,
    /// Global discrepancy factor in [0, 1].
    pub delta: f64,
}

impl WeightState {
    /// All-ones weights with zeroed scores (used by the non-robust variants).
    pub fn ones(n: usize) -> Self {
        WeightState {
            weights: vec![1.0; n],
            residuals: vec![0.0; n],
            leverage: vec![0.0; n],
            delta: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn zero_weight_count(&self) -> usize {
        self.weights.iter().filter(|&&w| w == 0.0).count()
    }
}

/// Standardized residuals r_it = (y_it - x_it'beta - z_it'b_i) / sigma,
/// flattened in subject order.
pub fn standardized_residuals(
    dataset: &LongitudinalDataset,
    beta: &FixedEffects,
    b: &[Vec<f64>],
    sigma: f64,
) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    assert_eq!(b.len(), dataset.n_subjects());
    let mut out = Vec::with_capacity(dataset.total_obs());
    for (s, bi) in dataset.subjects.iter().zip(b) {
        for t in 0..s.n_obs() {
            let fit = crate::numerics::dot(s.x.row(t), &beta.beta)
                + crate::numerics::dot(s.z.row(t), bi);
            out.push((s.y[t] - fit) / sigma);
        }
    }
    out
}

/// Robust squared Mahalanobis distances of every X row, via the stored
/// triangular factor of the scatter inverse.
pub fn leverage_distances(dataset: &LongitudinalDataset, scatter: &RobustScatter) -> Vec<f64> {
    let mut out = Vec::with_capacity(dataset.total_obs());
    for s in &dataset.subjects {
        for t in 0..s.n_obs() {
            out.push(scatter.mahalanobis_sq(s.x.row(t)));
        }
    }
    out
}

/// Exact one-sample Kolmogorov-Smirnov distance between the empirical CDF of
/// |r| and the half-normal reference, evaluated at the order statistics.
pub fn discrepancy_factor(residuals: &[f64]) -> f64 {
    assert!(!residuals.is_empty(), "need at least one residual");
    let mut abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
    abs.sort_unstable_by(f64::total_cmp);
    let n = abs.len() as f64;
    let mut sup = 0.0f64;
    for (i, &r) in abs.iter().enumerate() {
        let f0 = half_normal_cdf(r);
        let upper = (i + 1) as f64 / n - f0;
        let lower = f0 - i as f64 / n;
        sup = sup.max(upper).max(lower);
    }
    sup.clamp(0.0, 1.0)
}

/// Evaluates one weight factor at u >= 0. Non-increasing with phi(0) = 1.
///
/// Huber: min(1, c/u). Bisquare: (1 - (u/c)^2)^2 for u <= c, else 0.
pub fn weight_fn(spec: &WeightFnSpec, u: f64) -> f64 {
    debug_assert!(u >= 0.0);
    let c = spec.cutoff;
    match spec.family {
        WeightFamily::Huber => {
            if u <= c {
                1.0
            } else {
                c / u
            }
        }
        WeightFamily::Bisquare => {
            if u <= c {
                let r = u / c;
                let f = 1.0 - r * r;
                f * f
            } else {
                0.0
            }
        }
    }
}

/// Doubly adaptive weights w_it = phi1(delta |r_it|) * phi2(delta d^2_it).
///
/// Zero weights are permitted (bisquare redescends to exactly 0); downstream
/// solvers tolerate them.
pub fn compute_weights(
    residuals: &[f64],
    leverage: &[f64],
    delta: f64,
    residual_spec: &WeightFnSpec,
    leverage_spec: &WeightFnSpec,
) -> WeightState {
    assert_eq!(residuals.len(), leverage.len());
    assert!((0.0..=1.0).contains(&delta), "delta must be in [0,1]");
    let weights = residuals
        .iter()
        .zip(leverage)
        .map(|(&r, &d2)| {
            debug_assert!(d2 >= 0.0);
            let w = weight_fn(residual_spec, delta * r.abs()) * weight_fn(leverage_spec, delta * d2);
            debug_assert!((0.0..=1.0).contains(&w));
            w
        })
        .collect();
    WeightState {
        weights,
        residuals: residuals.to_vec(),
        leverage: leverage.to_vec(),
        delta,
    }
}
