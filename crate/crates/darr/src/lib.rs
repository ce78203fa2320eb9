//! Doubly adaptive robust regression (DAR-R) for high-dimensional longitudinal
//! linear mixed-effects models.
//!
//! The estimator combines a robust pilot fit, per-observation weights that
//! downweight both response outliers and covariate leverage points (calibrated
//! by a global discrepancy factor), folded-concave penalization (MCP/SCAD) of
//! the fixed effects solved by coordinate descent, and weighted empirical-Bayes
//! updates of the random effects and variance components.
//!
//! The crate is organized around the estimation pipeline:
//!
//! - [`data_model`]: longitudinal dataset containers and validation
//! - [`numerics`]: seeded RNG streams, special functions, small dense linear algebra
//! - [`robust_init`]: robust pilot estimates and robust location/scatter (FastMCD)
//! - [`weighting`]: standardized residuals, leverage distances, discrepancy
//!   factor, and the doubly adaptive weights
//! - [`mixed_effects`]: weighted empirical-Bayes random-effect updates, variance
//!   component updates, and profiled effective weights
//! - [`penalty`]: MCP/SCAD/Lasso penalties and exact scalar thresholding
//! - [`solver`]: the coordinate-descent M-step, the full EM iteration, and the
//!   baseline estimator variants
//! - [`simulation`]: the benchmark data-generating process and contamination
//!   scenarios
//! - [`evaluation`]: estimation/prediction metrics, subject-level
//!   cross-validation, and selection-stability summaries
//! - [`cli`]: the `simulate | fit | cv | bench | predict | preprocess`
//!   command-line pipeline and its file formats
//!
//! See the `examples/` directory for a runnable tour of each capability.

pub mod cli;
pub mod data_model;
pub mod evaluation;
pub mod mixed_effects;
pub mod numerics;
pub mod penalty;
pub mod robust_init;
pub mod simulation;
pub mod solver;
pub mod weighting;

pub use data_model::{FixedEffects, LongitudinalDataset, ModelFit, RandomEffectsCov, SubjectBlock};
pub use penalty::{PenaltyFamily, PenaltySpec};
pub use simulation::{DgpConfig, Scenario, ScenarioConfig, SimTruth};
pub use solver::{SolverConfig, Variant};
pub use weighting::{WeightFamily, WeightFnSpec, WeightState};
