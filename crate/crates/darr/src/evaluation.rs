//! Estimation and prediction metrics, subject-level cross-validation, and
//! resampling-based selection-stability summaries.
//!
//! All metric operations are pure and permutation-invariant over subjects.
//! Prediction for new subjects uses the unweighted empirical-Bayes update on
//! the subject's own visits with the fitted covariance, which is also how the
//! cross-validation loss scores held-out subjects.

use crate::data_model::{LongitudinalDataset, ModelFit};
use crate::mixed_effects::reb_update;
use crate::numerics::{pairwise_sum, quantile, RngStream};
use crate::simulation::SimTruth;
use crate::solver::{
    fit_prepared, lambda_grid, lambda_max, prepare, recover_partial, zero_init, FitInit,
    SolverConfig, SolverError, Variant,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("cross-validation needs at least K subjects: n = {n}, K = {k}")]
    InsufficientSubjects { n: usize, k: usize },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Metric table for one fitted model. Estimation-side and prediction-side
/// fields are filled by their respective operations and start as NaN;
/// `merge` combines the two halves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse_active: f64,
    pub mse_inactive: f64,
    /// ||beta_hat - beta*||^2 over all coordinates, accumulated in one pass;
    /// the decomposition s*MSE(S) + (p-s)*MSE(S^c) must reproduce it.
    pub beta_sq_err: f64,
    pub tp: usize,
    pub fp: usize,
    /// Absent for fits without a covariance estimate (marginal Lasso).
    pub cov_frobenius: Option<f64>,
    pub mspe: f64,
    pub mae: f64,
    pub rmse: f64,
    pub medae: f64,
    pub subject_error_median: f64,
    pub subject_error_iqr: f64,
    pub model_size: usize,
}

impl Default for MetricsReport {
    fn default() -> Self {
        MetricsReport {
            mse_active: f64::NAN,
            mse_inactive: f64::NAN,
            beta_sq_err: f64::NAN,
            tp: 0,
            fp: 0,
            cov_frobenius: None,
            mspe: f64::NAN,
            mae: f64::NAN,
            rmse: f64::NAN,
            medae: f64::NAN,
            subject_error_median: f64::NAN,
            subject_error_iqr: f64::NAN,
            model_size: 0,
        }
    }
}

impl MetricsReport {
    /// Combines an estimation-side and a prediction-side report.
    pub fn merge(estimation: &MetricsReport, prediction: &MetricsReport) -> MetricsReport {
        MetricsReport {
            mspe: prediction.mspe,
            mae: prediction.mae,
            rmse: prediction.rmse,
            medae: prediction.medae,
            subject_error_median: prediction.subject_error_median,
            subject_error_iqr: prediction.subject_error_iqr,
            ..estimation.clone()
        }
    }
}

/// Coefficient-recovery and selection metrics against the simulation truth.
pub fn estimation_metrics(fit: &ModelFit, truth: &SimTruth) -> MetricsReport {
    let p = fit.beta.len();
    assert_eq!(p, truth.beta_star.len(), "dimension mismatch");
    let s = truth.support.len();
    let active: std::collections::HashSet<usize> = truth.support.iter().cloned().collect();
    let mut sq_active = Vec::with_capacity(s);
    let mut sq_inactive = Vec::with_capacity(p - s);
    let mut sq_all = Vec::with_capacity(p);
    let mut tp = 0usize;
    let mut fp = 0usize;
    for j in 0..p {
        let d = fit.beta.beta[j] - truth.beta_star[j];
        let selected = fit.beta.beta[j].abs() > fit.tau_sel;
        sq_all.push(d * d);
        if active.contains(&j) {
            sq_active.push(d * d);
            if selected {
                tp += 1;
            }
        } else {
            sq_inactive.push(d * d);
            if selected {
                fp += 1;
            }
        }
    }
    let cov_frobenius = if fit.variant == Variant::MarginalLasso {
        None
    } else {
        Some(
            fit.d_hat
                .matrix()
                .sub(truth.d_star.matrix())
                .frobenius_norm(),
        )
    };
    MetricsReport {
        mse_active: pairwise_sum(&sq_active) / s.max(1) as f64,
        mse_inactive: pairwise_sum(&sq_inactive) / (p - s).max(1) as f64,
        beta_sq_err: pairwise_sum(&sq_all),
        tp,
        fp,
        cov_frobenius,
        model_size: fit.support.len(),
        ..MetricsReport::default()
    }
}

/// Per-observation prediction residuals on a test set, with new-subject
/// random effects from the unweighted empirical-Bayes update.
pub fn prediction_residuals(fit: &ModelFit, test: &LongitudinalDataset) -> Vec<Vec<f64>> {
    assert_eq!(test.p, fit.beta.len(), "dimension mismatch");
    test.subjects
        .iter()
        .map(|s| {
            let ones = vec![1.0; s.n_obs()];
            let b = reb_update(s, &ones, &fit.d_hat, &fit.beta)
                .expect("floored covariance is PD")
                .b_hat;
            (0..s.n_obs())
                .map(|t| {
                    s.y[t]
                        - crate::numerics::dot(s.x.row(t), &fit.beta.beta)
                        - crate::numerics::dot(s.z.row(t), &b)
                })
                .collect()
        })
        .collect()
}

/// Out-of-sample prediction metrics on a clean test set.
pub fn prediction_metrics(fit: &ModelFit, test: &LongitudinalDataset) -> MetricsReport {
    let residuals = prediction_residuals(fit, test);
    let flat: Vec<f64> = residuals.iter().flatten().cloned().collect();
    let n = flat.len() as f64;
    let sq: Vec<f64> = flat.iter().map(|e| e * e).collect();
    let abs: Vec<f64> = flat.iter().map(|e| e.abs()).collect();
    let mspe = pairwise_sum(&sq) / n;
    let mae = pairwise_sum(&abs) / n;
    let medae = crate::numerics::median(&abs);
    // Subject-averaged absolute errors, summarized by median and IQR.
    let subject_means: Vec<f64> = residuals
        .iter()
        .map(|r| {
            let a: Vec<f64> = r.iter().map(|e| e.abs()).collect();
            pairwise_sum(&a) / a.len() as f64
        })
        .collect();
    MetricsReport {
        mspe,
        mae,
        rmse: mspe.sqrt(),
        medae,
        subject_error_median: crate::numerics::median(&subject_means),
        subject_error_iqr: quantile(&subject_means, 0.75) - quantile(&subject_means, 0.25),
        ..MetricsReport::default()
    }
}

/// One point of a cross-validation curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvPoint {
    pub lambda: f64,
    pub mean_loss: f64,
    pub fold_losses: Vec<f64>,
}

/// Full cross-validation result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda_best: f64,
    pub curve: Vec<CvPoint>,
    /// Fold index of every subject, in dataset order.
    pub fold_assignment: Vec<usize>,
}

/// Subjects partitioned into K folds by a seeded shuffle: disjoint, covering,
/// balanced to within one subject.
pub fn subject_folds(n_subjects: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_subjects).collect();
    let mut rng = RngStream::new(seed, 3);
    rng.shuffle(&mut order);
    let mut assignment = vec![0usize; n_subjects];
    for (pos, &subj) in order.iter().enumerate() {
        assignment[subj] = pos % k;
    }
    assignment
}

fn subset_dataset(dataset: &LongitudinalDataset, keep: &[bool]) -> LongitudinalDataset {
    LongitudinalDataset {
        subjects: dataset
            .subjects
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(s, _)| s.clone())
            .collect(),
        p: dataset.p,
        q: dataset.q,
    }
}

/// Subject-level K-fold cross-validation over a shared penalty grid.
///
/// The grid comes from the full dataset; each fold fits the grid warm-started
/// from larger penalties, and the validation loss is the unweighted mean
/// squared prediction error on held-out subjects (random effects predicted
/// from the held-out subjects' own visits). Ties in the mean curve break
/// toward the larger penalty.
pub fn cv_select(
    dataset: &LongitudinalDataset,
    cfg: &SolverConfig,
    k: usize,
    n_lambda: usize,
) -> Result<CvResult, EvaluationError> {
    let n = dataset.n_subjects();
    if k < 2 || n < k {
        return Err(EvaluationError::InsufficientSubjects { n, k });
    }
    let prep = prepare(dataset, cfg)?;
    let lmax = lambda_max(dataset, &prep, cfg)?;
    let grid = lambda_grid(lmax, n_lambda);
    let assignment = subject_folds(n, k, cfg.seed);
    cv_select_with_folds(dataset, cfg, &assignment, &grid)
}

/// Cross-validation with explicit fold assignments and penalty grid.
pub fn cv_select_with_folds(
    dataset: &LongitudinalDataset,
    cfg: &SolverConfig,
    fold_assignment: &[usize],
    grid: &[f64],
) -> Result<CvResult, EvaluationError> {
    let n = dataset.n_subjects();
    assert_eq!(fold_assignment.len(), n);
    let k = fold_assignment.iter().max().map_or(0, |m| m + 1);

    // (fold, lambda) -> (sum squared error, count), computed per fold in
    // parallel with order restored by collect.
    let fold_results: Vec<Result<Vec<(f64, usize)>, EvaluationError>> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let train_mask: Vec<bool> = fold_assignment.iter().map(|&f| f != fold).collect();
            let train = subset_dataset(dataset, &train_mask);
            let holdout_mask: Vec<bool> = train_mask.iter().map(|&m| !m).collect();
            let holdout = subset_dataset(dataset, &holdout_mask);
            let prep = prepare(&train, cfg)?;
            let mut warm: Option<FitInit> = None;
            let mut losses = Vec::with_capacity(grid.len());
            for (i, &lambda) in grid.iter().enumerate() {
                let step_cfg = cfg.clone().with_lambda(lambda);
                let init = if i == 0 {
                    Some(zero_init(&train, &prep, cfg))
                } else {
                    warm.clone()
                };
                let fit = recover_partial(fit_prepared(&train, &prep, &step_cfg, init))?;
                let residuals = prediction_residuals(&fit, &holdout);
                let sq: Vec<f64> = residuals.iter().flatten().map(|e| e * e).collect();
                losses.push((pairwise_sum(&sq), sq.len()));
                warm = Some(FitInit::warm_beta(&fit, &prep.pilot));
            }
            Ok(losses)
        })
        .collect();

    let mut per_fold = Vec::with_capacity(k);
    for r in fold_results {
        per_fold.push(r?);
    }
    let mut curve = Vec::with_capacity(grid.len());
    for (i, &lambda) in grid.iter().enumerate() {
        let fold_losses: Vec<f64> = per_fold
            .iter()
            .map(|f| {
                let (sse, count) = f[i];
                sse / count.max(1) as f64
            })
            .collect();
        let mean_loss = pairwise_sum(&fold_losses) / k as f64;
        curve.push(CvPoint {
            lambda,
            mean_loss,
            fold_losses,
        });
    }
    // Grid is descending in lambda; strict improvement keeps the larger one.
    let mut best = 0;
    for (i, point) in curve.iter().enumerate() {
        if point.mean_loss < curve[best].mean_loss {
            best = i;
        }
    }
    Ok(CvResult {
        lambda_best: curve[best].lambda,
        curve,
        fold_assignment: fold_assignment.to_vec(),
    })
}

/// Per-predictor selection stability across resample fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Fraction of resamples selecting each predictor (multiples of 1/R).
    pub selection_frequency: Vec<f64>,
    /// Among resamples selecting the predictor, the share of the majority
    /// sign; 1.0 when never selected.
    pub sign_consistency: Vec<f64>,
    /// Median of the nonzero coefficient values; 0.0 when never selected.
    pub coef_median: Vec<f64>,
    /// IQR of the nonzero coefficient values; 0.0 when never selected.
    pub coef_iqr: Vec<f64>,
    /// Average Jaccard similarity over all unordered pairs of selected sets,
    /// with J(empty, empty) = 1.
    pub jaccard_mean: f64,
}

fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let mut inter = 0usize;
    let (mut i, mut j) = (0usize, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Selection-stability summary over resample fits (requires at least two).
pub fn stability(fits: &[ModelFit]) -> StabilityReport {
    assert!(fits.len() >= 2, "stability needs at least two fits");
    let p = fits[0].beta.len();
    let r = fits.len() as f64;
    let mut selection_frequency = vec![0.0; p];
    let mut sign_consistency = vec![1.0; p];
    let mut coef_median = vec![0.0; p];
    let mut coef_iqr = vec![0.0; p];
    for j in 0..p {
        let values: Vec<f64> = fits
            .iter()
            .filter(|f| f.support.binary_search(&j).is_ok())
            .map(|f| f.beta.beta[j])
            .collect();
        if values.is_empty() {
            continue;
        }
        selection_frequency[j] = values.len() as f64 / r;
        let pos = values.iter().filter(|&&v| v > 0.0).count();
        let neg = values.len() - pos;
        sign_consistency[j] = pos.max(neg) as f64 / values.len() as f64;
        coef_median[j] = crate::numerics::median(&values);
        coef_iqr[j] = quantile(&values, 0.75) - quantile(&values, 0.25);
    }
    let mut jac_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..fits.len() {
        for j in (i + 1)..fits.len() {
            jac_sum += jaccard(&fits[i].support, &fits[j].support);
            pairs += 1;
        }
    }
    StabilityReport {
        selection_frequency,
        sign_consistency,
        coef_median,
        coef_iqr,
        jaccard_mean: jac_sum / pairs as f64,
    }
}
