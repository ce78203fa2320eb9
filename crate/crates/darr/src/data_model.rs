//! Core domain types for longitudinal data and fitted models.
//!
//! Datasets are stored as per-subject dense blocks (response, fixed-effect
//! design, random-effect design) so the per-subject T x q algebra stays cache
//! friendly. All types are immutable values after construction and safe to
//! share across threads.

use crate::numerics::{sym_eigen, Mat};
use crate::solver::{ConvergenceTrace, Variant};
use crate::weighting::WeightState;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default selection threshold: |beta_j| > tau counts as selected.
pub const TAU_SEL_DEFAULT: f64 = 1e-8;

/// Eigenvalue floor applied to any random-effects covariance used in an
/// inverse, keeping D^{-1} well defined.
pub const D_MIN: f64 = 1e-6;

/// One subject's measurements: `times` strictly increasing, `y` of length T,
/// `x` of shape T x p, `z` of shape T x q.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectBlock {
    pub id: String,
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    pub x: Mat,
    pub z: Mat,
}

impl SubjectBlock {
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }
}

/// A complete longitudinal dataset with common fixed-effect dimension `p`
/// and random-effect dimension `q` across subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    pub subjects: Vec<SubjectBlock>,
    pub p: usize,
    pub q: usize,
}

impl LongitudinalDataset {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Total number of observations N.
    pub fn total_obs(&self) -> usize {
        self.subjects.iter().map(|s| s.n_obs()).sum()
    }

    /// Row offset of each subject's first observation in flattened order.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.subjects.len());
        let mut acc = 0;
        for s in &self.subjects {
            out.push(acc);
            acc += s.n_obs();
        }
        out
    }

    /// All fixed-effect design rows stacked into an N x p matrix.
    pub fn stack_x_rows(&self) -> Mat {
        let mut out = Mat::zeros(self.total_obs(), self.p);
        let mut r = 0;
        for s in &self.subjects {
            for t in 0..s.n_obs() {
                out.row_mut(r).copy_from_slice(s.x.row(t));
                r += 1;
            }
        }
        out
    }
}

/// Fixed-effect coefficient vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffects {
    pub beta: Vec<f64>,
}

impl FixedEffects {
    pub fn zeros(p: usize) -> Self {
        FixedEffects { beta: vec![0.0; p] }
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }
}

/// Random-effects covariance matrix: symmetric, eigenvalues >= 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomEffectsCov {
    d: Mat,
}

#[derive(Debug, Error)]
pub enum CovError {
    #[error("covariance must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("covariance asymmetric beyond 1e-10 (max |d_ij - d_ji| = {worst})")]
    Asymmetric { worst: f64 },
    #[error("covariance has eigenvalue {value} below zero")]
    NegativeEigenvalue { value: f64 },
}

impl RandomEffectsCov {
    /// Validates symmetry (1e-10) and positive semidefiniteness. Symmetrizes
    /// roundoff-level asymmetry and clamps eigenvalues in [-1e-10, 0) to 0.
    pub fn new(d: Mat) -> Result<Self, CovError> {
        if d.nrows() != d.ncols() {
            return Err(CovError::NotSquare {
                rows: d.nrows(),
                cols: d.ncols(),
            });
        }
        let worst = d.max_abs_asymmetry();
        if worst > 1e-10 * (1.0 + d.frobenius_norm()) {
            return Err(CovError::Asymmetric { worst });
        }
        let mut sym = d.clone();
        for i in 0..sym.nrows() {
            for j in (i + 1)..sym.ncols() {
                let v = 0.5 * (sym[(i, j)] + sym[(j, i)]);
                sym[(i, j)] = v;
                sym[(j, i)] = v;
            }
        }
        let (vals, _) = sym_eigen(&sym);
        let scale = 1.0 + sym.frobenius_norm();
        if let Some(&min) = vals.first() {
            if min < -1e-10 * scale {
                return Err(CovError::NegativeEigenvalue { value: min });
            }
            if min < 0.0 {
                return Ok(RandomEffectsCov {
                    d: clamp_eigenvalues(&sym, 0.0),
                });
            }
        }
        Ok(RandomEffectsCov { d: sym })
    }

    pub fn identity(q: usize) -> Self {
        RandomEffectsCov {
            d: Mat::identity(q),
        }
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        assert!(diag.iter().all(|&v| v >= 0.0));
        RandomEffectsCov {
            d: Mat::diag(diag),
        }
    }

    pub fn dim(&self) -> usize {
        self.d.nrows()
    }

    pub fn matrix(&self) -> &Mat {
        &self.d
    }

    /// Working covariance with eigenvalues floored at `d_min`. Returns the
    /// value unchanged (bit for bit) when no eigenvalue is below the floor.
    pub fn floored(&self, d_min: f64) -> RandomEffectsCov {
        let (vals, _) = sym_eigen(&self.d);
        if vals.iter().all(|&v| v >= d_min) {
            return self.clone();
        }
        RandomEffectsCov {
            d: clamp_eigenvalues(&self.d, d_min),
        }
    }

    pub fn min_eigenvalue(&self) -> f64 {
        sym_eigen(&self.d).0[0]
    }
}

fn clamp_eigenvalues(m: &Mat, floor: f64) -> Mat {
    let (vals, vecs) = sym_eigen(m);
    let n = m.nrows();
    let mut out = Mat::zeros(n, n);
    for k in 0..n {
        let lam = vals[k].max(floor);
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] += lam * vecs[(i, k)] * vecs[(j, k)];
            }
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// A fitted model: coefficients, predicted random effects, variance
/// components, final weights, and the convergence trace.
#[derive(Debug, Clone)]
pub struct ModelFit {
    pub beta: FixedEffects,
    pub b_hat: Vec<Vec<f64>>,
    pub d_hat: RandomEffectsCov,
    pub sigma2_hat: f64,
    pub weights: WeightState,
    pub support: Vec<usize>,
    pub trace: ConvergenceTrace,
    pub iterations: usize,
    pub tau_sel: f64,
    pub variant: Variant,
    pub lambda: f64,
    pub converged: bool,
}

/// A single violated dataset invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationIssue {
    EmptyDataset,
    EmptySubject { id: String },
    DimensionMismatch { id: String, detail: String },
    NonFinite { id: String, field: &'static str },
    DuplicateId { id: String },
    TimesNotIncreasing { id: String },
}

impl std::fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ValidationIssue::EmptyDataset => write!(f, "dataset has no observations"),
            ValidationIssue::EmptySubject { id } => write!(f, "subject {id} has no visits"),
            ValidationIssue::DimensionMismatch { id, detail } => {
                write!(f, "subject {id}: dimension mismatch ({detail})")
            }
            ValidationIssue::NonFinite { id, field } => {
                write!(f, "subject {id}: non-finite entry in {field}")
            }
            ValidationIssue::DuplicateId { id } => write!(f, "duplicate subject id {id}"),
            ValidationIssue::TimesNotIncreasing { id } => {
                write!(f, "subject {id}: times not strictly increasing")
            }
        }
    }
}

/// Validation failure carrying every violated invariant.
#[derive(Debug, Error)]
#[error("invalid dataset: {}", issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
pub struct ValidationError {
    pub issues: Vec<ValidationIssue>,
}

/// Checks every dataset invariant, returning all violations at once.
///
/// Idempotent and side-effect free.
pub fn validate(dataset: &LongitudinalDataset) -> Result<(), ValidationError> {
    let mut issues = Vec::new();
    if dataset.total_obs() == 0 {
        issues.push(ValidationIssue::EmptyDataset);
    }
    let mut seen = std::collections::HashSet::new();
    for s in &dataset.subjects {
        if !seen.insert(s.id.clone()) {
            issues.push(ValidationIssue::DuplicateId { id: s.id.clone() });
        }
        let t = s.n_obs();
        if t == 0 {
            issues.push(ValidationIssue::EmptySubject { id: s.id.clone() });
            continue;
        }
        if s.times.len() != t {
            issues.push(ValidationIssue::DimensionMismatch {
                id: s.id.clone(),
                detail: format!("times has length {}, y has length {}", s.times.len(), t),
            });
        }
        if s.x.nrows() != t || s.x.ncols() != dataset.p {
            issues.push(ValidationIssue::DimensionMismatch {
                id: s.id.clone(),
                detail: format!(
                    "X is {}x{}, expected {}x{}",
                    s.x.nrows(),
                    s.x.ncols(),
                    t,
                    dataset.p
                ),
            });
        }
        if s.z.nrows() != t || s.z.ncols() != dataset.q {
            issues.push(ValidationIssue::DimensionMismatch {
                id: s.id.clone(),
                detail: format!(
                    "Z is {}x{}, expected {}x{}",
                    s.z.nrows(),
                    s.z.ncols(),
                    t,
                    dataset.q
                ),
            });
        }
        if s.y.iter().any(|v| !v.is_finite()) {
            issues.push(ValidationIssue::NonFinite {
                id: s.id.clone(),
                field: "y",
            });
        }
        if s.times.iter().any(|v| !v.is_finite()) {
            issues.push(ValidationIssue::NonFinite {
                id: s.id.clone(),
                field: "times",
            });
        }
        if s.x.data().iter().any(|v| !v.is_finite()) {
            issues.push(ValidationIssue::NonFinite {
                id: s.id.clone(),
                field: "x",
            });
        }
        if s.z.data().iter().any(|v| !v.is_finite()) {
            issues.push(ValidationIssue::NonFinite {
                id: s.id.clone(),
                field: "z",
            });
        }
        if s.times.windows(2).any(|w| w[1] <= w[0]) {
            issues.push(ValidationIssue::TimesNotIncreasing { id: s.id.clone() });
        }
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(ValidationError { issues })
    }
}

/// Indices with |beta_j| > tau, ascending.
pub fn support(beta: &FixedEffects, tau: f64) -> Vec<usize> {
    assert!(tau > 0.0, "support threshold must be positive");
    beta.beta
        .iter()
        .enumerate()
        .filter(|(_, &b)| b.abs() > tau)
        .map(|(j, _)| j)
        .collect()
}
