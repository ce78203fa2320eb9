//! Independent oracles for the acceptance suite. Everything here recomputes
//! expected values by brute force (grids, golden-section refinement, subset
//! enumeration) without touching the implementation paths it checks.

use darr::numerics::{half_normal_cdf, Mat, RngStream, SpdFactor};
use darr::penalty::{penalty_value, PenaltySpec};

/// Objective of the scalar coordinate subproblem at effective level `nlambda`.
pub fn scalar_objective(z: f64, u: f64, nlambda: f64, spec: &PenaltySpec, beta: f64) -> f64 {
    let eff = spec.with_lambda(nlambda);
    0.5 * z * (beta - u) * (beta - u) + penalty_value(&eff, beta.abs())
}

/// Brute-force scalar minimizer: golden-section refinement on every smooth
/// piece of the penalty plus the piece boundaries.
pub fn prox_oracle(z: f64, u: f64, nlambda: f64, spec: &PenaltySpec) -> f64 {
    use darr::penalty::PenaltyFamily;
    let breakpoints: Vec<f64> = match spec.family {
        PenaltyFamily::Mcp => vec![0.0, spec.gamma * nlambda],
        PenaltyFamily::Scad => vec![0.0, nlambda, spec.gamma * nlambda],
        PenaltyFamily::Lasso | PenaltyFamily::AdaptiveLasso => vec![0.0],
    };
    let hi = u.abs() + 1.0;
    let f = |x: f64| scalar_objective(z, u, nlambda, spec, x);
    let mut candidates = vec![0.0];
    for sign in [-1.0f64, 1.0] {
        let mut pts: Vec<f64> = breakpoints.iter().map(|&b| sign * b).collect();
        pts.push(sign * hi);
        pts.sort_by(f64::total_cmp);
        for w in pts.windows(2) {
            let (mut a, mut b) = (w[0], w[1]);
            if (b - a).abs() < 1e-300 {
                continue;
            }
            let gr = (5.0f64.sqrt() - 1.0) / 2.0;
            let mut c = b - gr * (b - a);
            let mut d = a + gr * (b - a);
            for _ in 0..200 {
                if f(c) < f(d) {
                    b = d;
                } else {
                    a = c;
                }
                c = b - gr * (b - a);
                d = a + gr * (b - a);
                if (b - a).abs() < 1e-13 {
                    break;
                }
            }
            candidates.push(0.5 * (a + b));
            candidates.push(w[0]);
            candidates.push(w[1]);
        }
    }
    let mut best = candidates[0];
    let mut best_val = f(best);
    for &c in &candidates[1..] {
        let v = f(c);
        if v < best_val {
            best_val = v;
            best = c;
        }
    }
    best
}

/// Dense-grid sup of |F_n(u) - F_0(u)|, counting the empirical CDF directly.
pub fn discrepancy_grid_oracle(residuals: &[f64]) -> f64 {
    let abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
    let n = abs.len() as f64;
    let max = abs.iter().cloned().fold(0.0f64, f64::max);
    let mut grid: Vec<f64> = vec![0.0];
    let m = 20_000;
    for k in 0..=m {
        grid.push(max * 1.5 * k as f64 / m as f64 + 1e-12);
    }
    for &a in &abs {
        grid.push(a);
        let eps = (a.abs() * 1e-14).max(1e-300);
        grid.push((a - eps).max(0.0));
    }
    let mut sup = 0.0f64;
    for &u in &grid {
        let fn_u = abs.iter().filter(|&&a| a <= u).count() as f64 / n;
        sup = sup.max((fn_u - half_normal_cdf(u)).abs());
    }
    sup
}

/// Exhaustive M-step objective minimum over a regular grid, by nested
/// partial-residual recursion. Objective:
/// `sum w (y - x beta)^2 + N sum_j p_lambda(|beta_j|)`.
pub fn m_step_grid_minimum(
    x: &Mat,
    y: &[f64],
    w: &[f64],
    penalty: &PenaltySpec,
    lo: f64,
    hi: f64,
    points: usize,
) -> f64 {
    let p = x.ncols();
    let n_f = x.nrows() as f64;
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
            let pen = pen_acc + n_f * penalty_value(penalty, g.abs());
            recurse(x, w, grid, penalty, n_f, level + 1, p, &next, pen, best);
        }
    }
    let mut best = f64::INFINITY;
    recurse(x, w, &grid, penalty, n_f, 0, p, y, 0.0, &mut best);
    best
}

/// Minimum-determinant h-subset by direct enumeration.
pub fn brute_force_mcd(rows: &Mat, h: usize) -> (f64, Vec<usize>) {
    let n = rows.nrows();
    let p = rows.ncols();
    let mut best_det = f64::INFINITY;
    let mut best_subset = Vec::new();
    let mut subset: Vec<usize> = (0..h).collect();
    loop {
        // Subset mean and covariance (denominator h - 1).
        let mut mean = vec![0.0; p];
        for &i in &subset {
            for (m, &v) in mean.iter_mut().zip(rows.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= h as f64;
        }
        let mut cov = Mat::zeros(p, p);
        for &i in &subset {
            let r = rows.row(i);
            for a in 0..p {
                for b in 0..p {
                    cov[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]);
                }
            }
        }
        let denom = (h - 1) as f64;
        for a in 0..p {
            for b in 0..p {
                cov[(a, b)] /= denom;
            }
        }
        let det = SpdFactor::new(&cov).map(|f| f.det()).unwrap_or(0.0);
        if det < best_det {
            best_det = det;
            best_subset = subset.clone();
        }
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
    (best_det, best_subset)
}

/// Random matrix of standard normals.
pub fn random_rows(rng: &mut RngStream, n: usize, p: usize) -> Mat {
    Mat::from_rows(
        &(0..n)
            .map(|_| (0..p).map(|_| rng.normal()).collect())
            .collect::<Vec<_>>(),
    )
}
