//! Robust pilot estimates and robust location/scatter of the covariates.
//!
//! The pilot only needs bounded influence, not maximal breakdown: fixed
//! effects come from an IRLS Huber regression on within-subject-centered data
//! with a small ridge, random effects from per-subject ridge regressions of
//! the pilot residuals on Z, and the pilot scale from the MAD of the final
//! residuals. Covariate leverage is measured against either a coordinatewise
//! median/MAD scatter (the default; always feasible) or FastMCD when requested
//! and the sample is large enough relative to p.

use crate::data_model::{FixedEffects, LongitudinalDataset, RandomEffectsCov};
use crate::numerics::{
    chi2_cdf, chi2_quantile, mad, median, Mat, NumericsError, RngStream, SpdFactor,
    MAD_NORMAL_CONSISTENCY,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RobustInitError {
    #[error("pilot normal equations are numerically singular even with ridge: {0}")]
    SingularSystem(NumericsError),
    #[error("degenerate scatter: coordinate {coordinate} has zero MAD and the floor is disabled")]
    DegenerateScatter { coordinate: usize },
    #[error("MCD subset size {h} is below p + 1 = {min}")]
    InfeasibleSubset { h: usize, min: usize },
    #[error("need at least 2 rows for a scatter estimate, got {n}")]
    TooFewRows { n: usize },
}

/// Pilot configuration. The ridge is `ridge_scale * mean(diag(X'X))` of the
/// centered design.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PilotConfig {
    pub huber_c: f64,
    pub ridge_scale: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub scale_floor: f64,
}

impl Default for PilotConfig {
    fn default() -> Self {
        PilotConfig {
            huber_c: 1.345,
            ridge_scale: 1e-3,
            max_iter: 50,
            tol: 1e-8,
            scale_floor: 1e-6,
        }
    }
}

/// Robust pilot estimates feeding the first weighting pass.
#[derive(Debug, Clone)]
pub struct PilotEstimates {
    pub beta: FixedEffects,
    pub b: Vec<Vec<f64>>,
    pub sigma: f64,
    pub d0: RandomEffectsCov,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScatterMode {
    Diagonal,
    Mcd,
}

/// Scatter configuration. `prefer_mcd` requests FastMCD, granted only when
/// N >= 2(p + 1); otherwise the coordinatewise median/MAD scatter is used.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScatterConfig {
    pub prefer_mcd: bool,
    pub mad_floor: bool,
    pub mcd_n_starts: usize,
    pub mcd_h_fraction: f64,
    pub seed: u64,
}

impl Default for ScatterConfig {
    fn default() -> Self {
        ScatterConfig {
            prefer_mcd: false,
            mad_floor: true,
            mcd_n_starts: 20,
            mcd_h_fraction: 0.75,
            seed: 0,
        }
    }
}

/// Robust location/scatter pair with a cached triangular factor of the
/// scatter inverse for fast Mahalanobis distances.
#[derive(Debug, Clone)]
pub struct RobustScatter {
    pub location: Vec<f64>,
    pub scatter: Mat,
    pub mode: ScatterMode,
    /// Lower-triangular F with F'F = scatter^{-1}.
    pub inverse_factor: Mat,
}

impl RobustScatter {
    fn from_parts(location: Vec<f64>, scatter: Mat, mode: ScatterMode) -> Result<Self, NumericsError> {
        let factor = SpdFactor::new(&scatter)?;
        Ok(RobustScatter {
            location,
            scatter,
            mode,
            inverse_factor: factor.lower_inverse(),
        })
    }

    /// Squared robust Mahalanobis distance (x - loc)' scatter^{-1} (x - loc).
    pub fn mahalanobis_sq(&self, x: &[f64]) -> f64 {
        let p = self.location.len();
        debug_assert_eq!(x.len(), p);
        // ||F (x - loc)||^2 with F lower triangular.
        let mut d2 = 0.0;
        for i in 0..p {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += self.inverse_factor[(i, j)] * (x[j] - self.location[j]);
            }
            d2 += acc * acc;
        }
        d2
    }
}

/// Robust pilot fit: Huber IRLS on within-subject-centered data, per-subject
/// ridge random effects, MAD residual scale.
pub fn pilot_fit(
    dataset: &LongitudinalDataset,
    config: &PilotConfig,
) -> Result<PilotEstimates, RobustInitError> {
    let p = dataset.p;
    let q = dataset.q;
    let n_obs = dataset.total_obs();

    // Within-subject centering of both response and covariate columns: this
    // removes the random intercept and keeps the regression consistent.
    let mut yc = Vec::with_capacity(n_obs);
    let mut xc = Mat::zeros(n_obs, p);
    let mut row = 0;
    for s in &dataset.subjects {
        let y_med = median(&s.y);
        let mut col_med = vec![0.0; p];
        for j in 0..p {
            let col: Vec<f64> = (0..s.n_obs()).map(|t| s.x[(t, j)]).collect();
            col_med[j] = median(&col);
        }
        for t in 0..s.n_obs() {
            yc.push(s.y[t] - y_med);
            let out = xc.row_mut(row);
            let xin = s.x.row(t);
            for j in 0..p {
                out[j] = xin[j] - col_med[j];
            }
            row += 1;
        }
    }

    // Ridge level from the centered design.
    let mut diag_sum = 0.0;
    for r in 0..n_obs {
        let xr = xc.row(r);
        for j in 0..p {
            diag_sum += xr[j] * xr[j];
        }
    }
    let ridge = if diag_sum > 0.0 {
        config.ridge_scale * diag_sum / p as f64
    } else {
        config.ridge_scale
    };

    // IRLS Huber with MAD scale refreshed each iteration.
    let mut beta = vec![0.0; p];
    let mut gram = Mat::zeros(p, p);
    let mut rhs = vec![0.0; p];
    for _iter in 0..config.max_iter {
        let resid: Vec<f64> = (0..n_obs)
            .map(|r| yc[r] - crate::numerics::dot(xc.row(r), &beta))
            .collect();
        let scale = (MAD_NORMAL_CONSISTENCY * mad(&resid)).max(config.scale_floor);
        for j in 0..p {
            rhs[j] = 0.0;
            for k in 0..p {
                gram[(j, k)] = 0.0;
            }
        }
        for r in 0..n_obs {
            let u = resid[r].abs() / scale;
            let w = if u <= config.huber_c {
                1.0
            } else {
                config.huber_c / u
            };
            let xr = xc.row(r);
            for j in 0..p {
                let wx = w * xr[j];
                rhs[j] += wx * yc[r];
                for k in j..p {
                    gram[(j, k)] += wx * xr[k];
                }
            }
        }
        for j in 0..p {
            gram[(j, j)] += ridge;
            for k in (j + 1)..p {
                gram[(k, j)] = gram[(j, k)];
            }
        }
        let factor = SpdFactor::new(&gram).map_err(RobustInitError::SingularSystem)?;
        let beta_new = factor.solve(&rhs);
        let max_change = beta
            .iter()
            .zip(&beta_new)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let scale_ref = beta.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        beta = beta_new;
        if max_change <= config.tol * (1.0 + scale_ref) {
            break;
        }
    }

    // Per-subject ridge random effects on the raw (uncentered) residuals.
    let mut b = Vec::with_capacity(dataset.n_subjects());
    for s in &dataset.subjects {
        let mut a = Mat::identity(q);
        let mut zrhs = vec![0.0; q];
        for t in 0..s.n_obs() {
            let e = s.y[t] - crate::numerics::dot(s.x.row(t), &beta);
            let zr = s.z.row(t);
            for rr in 0..q {
                zrhs[rr] += zr[rr] * e;
                for cc in 0..q {
                    a[(rr, cc)] += zr[rr] * zr[cc];
                }
            }
        }
        let factor = SpdFactor::new(&a).map_err(RobustInitError::SingularSystem)?;
        b.push(factor.solve(&zrhs));
    }

    // Pilot scale from the MAD of the full-model residuals.
    let mut eps = Vec::with_capacity(n_obs);
    for (s, bi) in dataset.subjects.iter().zip(&b) {
        for t in 0..s.n_obs() {
            eps.push(
                s.y[t]
                    - crate::numerics::dot(s.x.row(t), &beta)
                    - crate::numerics::dot(s.z.row(t), bi),
            );
        }
    }
    let sigma = (MAD_NORMAL_CONSISTENCY * mad(&eps)).max(config.scale_floor);

    Ok(PilotEstimates {
        beta: FixedEffects { beta },
        b,
        sigma,
        d0: RandomEffectsCov::identity(q),
    })
}

/// Robust location/scatter of the pooled covariate rows.
pub fn robust_location_scatter(
    rows: &Mat,
    config: &ScatterConfig,
) -> Result<RobustScatter, RobustInitError> {
    let n = rows.nrows();
    let p = rows.ncols();
    if n < 2 {
        return Err(RobustInitError::TooFewRows { n });
    }
    if config.prefer_mcd && n >= 2 * (p + 1) {
        let h = ((config.mcd_h_fraction * n as f64).floor() as usize)
            .max(p + 1)
            .min(n);
        let res = fast_mcd(rows, h, config.mcd_n_starts, config.seed)?;
        let scatter = regularize_pd(res.scatter);
        return RobustScatter::from_parts(res.location, scatter, ScatterMode::Mcd)
            .map_err(RobustInitError::SingularSystem);
    }
    // Diagonal median/MAD scatter with a per-coordinate variance floor.
    let mut location = vec![0.0; p];
    let mut variances = vec![0.0; p];
    for j in 0..p {
        let col: Vec<f64> = (0..n).map(|r| rows[(r, j)]).collect();
        location[j] = median(&col);
        let m = mad(&col);
        let range = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - col.iter().cloned().fold(f64::INFINITY, f64::min);
        let var = (MAD_NORMAL_CONSISTENCY * m).powi(2);
        if var == 0.0 && !config.mad_floor {
            return Err(RobustInitError::DegenerateScatter { coordinate: j });
        }
        let floor = 1e-6 * (range + 1.0);
        variances[j] = if config.mad_floor { var.max(floor) } else { var };
    }
    RobustScatter::from_parts(location, Mat::diag(&variances), ScatterMode::Diagonal)
        .map_err(RobustInitError::SingularSystem)
}

fn regularize_pd(mut scatter: Mat) -> Mat {
    let p = scatter.nrows();
    let mut jitter = 0.0;
    let base: f64 = (0..p).map(|i| scatter[(i, i)]).sum::<f64>() / p as f64;
    for _ in 0..60 {
        let mut trial = scatter.clone();
        for i in 0..p {
            trial[(i, i)] += jitter;
        }
        if SpdFactor::new(&trial).is_ok() {
            scatter = trial;
            break;
        }
        jitter = if jitter == 0.0 {
            1e-12 * (base.abs() + 1.0)
        } else {
            jitter * 10.0
        };
    }
    scatter
}

/// FastMCD output: the best h-subset found and its consistency-rescaled
/// scatter.
#[derive(Debug, Clone)]
pub struct McdResult {
    pub location: Vec<f64>,
    pub scatter: Mat,
    /// Indices of the selected h-subset, ascending.
    pub support: Vec<usize>,
    /// Raw (pre-rescaling) determinant of the subset covariance.
    pub determinant: f64,
}

fn subset_mean_cov(rows: &Mat, subset: &[usize]) -> (Vec<f64>, Mat) {
    let p = rows.ncols();
    let h = subset.len();
    let mut mean = vec![0.0; p];
    for &i in subset {
        let r = rows.row(i);
        for j in 0..p {
            mean[j] += r[j];
        }
    }
    for j in 0..p {
        mean[j] /= h as f64;
    }
    let mut cov = Mat::zeros(p, p);
    for &i in subset {
        let r = rows.row(i);
        for a in 0..p {
            let da = r[a] - mean[a];
            for b in a..p {
                cov[(a, b)] += da * (r[b] - mean[b]);
            }
        }
    }
    let denom = (h - 1).max(1) as f64;
    for a in 0..p {
        for b in a..p {
            cov[(a, b)] /= denom;
            cov[(b, a)] = cov[(a, b)];
        }
    }
    (mean, cov)
}

/// One concentration step: h smallest Mahalanobis distances under the current
/// (mean, cov). Ties break by row index, so the step is deterministic.
fn c_step(rows: &Mat, mean: &[f64], cov: &Mat, h: usize) -> Option<Vec<usize>> {
    let n = rows.nrows();
    let factor = SpdFactor::new(cov).ok()?;
    let mut scored: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let diff: Vec<f64> = rows
                .row(i)
                .iter()
                .zip(mean)
                .map(|(&x, &m)| x - m)
                .collect();
            let y = factor.solve(&diff);
            (crate::numerics::dot(&diff, &y), i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut subset: Vec<usize> = scored[..h].iter().map(|&(_, i)| i).collect();
    subset.sort_unstable();
    Some(subset)
}

fn run_c_steps(
    rows: &Mat,
    mut subset: Vec<usize>,
    h: usize,
    max_steps: usize,
) -> (Vec<usize>, Vec<f64>, Mat, f64) {
    let (mut mean, mut cov) = subset_mean_cov(rows, &subset);
    let mut det = SpdFactor::new(&cov).map(|f| f.det()).unwrap_or(0.0);
    for _ in 0..max_steps {
        if det == 0.0 {
            break; // exact fit: cannot improve
        }
        let next = match c_step(rows, &mean, &cov, h) {
            Some(s) => s,
            None => break,
        };
        if next == subset {
            break;
        }
        let (m2, c2) = subset_mean_cov(rows, &next);
        let det2 = SpdFactor::new(&c2).map(|f| f.det()).unwrap_or(0.0);
        debug_assert!(
            det2 <= det * (1.0 + 1e-9),
            "C-step increased determinant: {det2} > {det}"
        );
        subset = next;
        mean = m2;
        cov = c2;
        det = det2;
    }
    (subset, mean, cov, det)
}

/// Consistency factor alpha / F_{chi2_{p+2}}(chi2_{p, alpha}) with
/// alpha = h/N; equals 1 at h = N.
fn mcd_consistency_factor(h: usize, n: usize, p: usize) -> f64 {
    if h == n {
        return 1.0;
    }
    let alpha = h as f64 / n as f64;
    let q = chi2_quantile(alpha, p).expect("alpha in (0,1)");
    alpha / chi2_cdf(q, p + 2)
}

/// Classical FastMCD: random elemental starts, concentration steps, the best
/// few starts carried to convergence. Deterministic given the seed; ties in
/// the final determinant break toward the earlier start.
pub fn fast_mcd(
    rows: &Mat,
    h: usize,
    n_starts: usize,
    seed: u64,
) -> Result<McdResult, RobustInitError> {
    let n = rows.nrows();
    let p = rows.ncols();
    if h < p + 1 {
        return Err(RobustInitError::InfeasibleSubset { h, min: p + 1 });
    }
    assert!(h <= n, "subset size h={h} exceeds N={n}");
    if h == n {
        let subset: Vec<usize> = (0..n).collect();
        let (mean, cov) = subset_mean_cov(rows, &subset);
        let det = SpdFactor::new(&cov).map(|f| f.det()).unwrap_or(0.0);
        return Ok(McdResult {
            location: mean,
            scatter: cov,
            support: subset,
            determinant: det,
        });
    }

    let mut rng = RngStream::new(seed, 0);
    // Phase 1: elemental starts, two C-steps each.
    let mut partials: Vec<(f64, usize, Vec<usize>)> = Vec::with_capacity(n_starts);
    for start in 0..n_starts.max(1) {
        let mut elemental = rng.sample_indices(n, (p + 1).min(n));
        // Grow a singular elemental subset until its covariance is usable.
        let mut grown = elemental.clone();
        while grown.len() < h {
            let (mean, cov) = subset_mean_cov(rows, &grown);
            if SpdFactor::new(&cov).is_ok() {
                elemental = c_step(rows, &mean, &cov, h).unwrap_or_else(|| grown.clone());
                break;
            }
            let extra = rng.below(n);
            if !grown.contains(&extra) {
                grown.push(extra);
                grown.sort_unstable();
            }
        }
        if grown.len() >= h {
            elemental = grown[..h].to_vec();
        }
        let (subset, _, _, det) = run_c_steps(rows, elemental, h, 2);
        partials.push((det, start, subset));
    }
    // Phase 2: best five carried to convergence.
    partials.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let carry = partials.len().min(5);
    let mut best: Option<(f64, usize, McdResult)> = None;
    for (_, start, subset) in partials.into_iter().take(carry) {
        let (support, location, scatter, determinant) = run_c_steps(rows, subset, h, 200);
        let candidate = McdResult {
            location,
            scatter,
            support,
            determinant,
        };
        let better = match &best {
            None => true,
            Some((d, s, _)) => {
                candidate.determinant < *d || (candidate.determinant == *d && start < *s)
            }
        };
        if better {
            best = Some((candidate.determinant, start, candidate));
        }
    }
    let (_, _, mut result) = best.expect("at least one start");
    let c = mcd_consistency_factor(h, n, p);
    result.scatter = result.scatter.scale(c);
    Ok(result)
}

/// FastMCD with exhaustive starts: every h-subset is used as a start and
/// refined by concentration steps, so the global minimum-determinant subset
/// is always found. Intended for small N.
pub fn fast_mcd_exhaustive(rows: &Mat, h: usize) -> Result<McdResult, RobustInitError> {
    let n = rows.nrows();
    let p = rows.ncols();
    if h < p + 1 {
        return Err(RobustInitError::InfeasibleSubset { h, min: p + 1 });
    }
    assert!(h <= n);
    let mut best: Option<McdResult> = None;
    let mut subset: Vec<usize> = (0..h).collect();
    loop {
        let (support, location, scatter, determinant) = run_c_steps(rows, subset.clone(), h, 200);
        let better = match &best {
            None => true,
            Some(b) => {
                determinant < b.determinant
                    || (determinant == b.determinant && support < b.support)
            }
        };
        if better {
            best = Some(McdResult {
                location,
                scatter,
                support,
                determinant,
            });
        }
        // Advance to the next combination in lexicographic order.
        let mut i = h;
        let mut advanced = false;
        while i > 0 {
            i -= 1;
            if subset[i] != i + n - h {
                subset[i] += 1;
                for k in (i + 1)..h {
                    subset[k] = subset[k - 1] + 1;
                }
                advanced = true;
                break;
            }
        }
        if !advanced {
            break;
        }
    }
    let mut result = best.expect("at least one subset");
    let c = mcd_consistency_factor(h, n, p);
    result.scatter = result.scatter.scale(c);
    Ok(result)
}
