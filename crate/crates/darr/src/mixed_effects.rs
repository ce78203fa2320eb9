//! Weighted empirical-Bayes random-effect updates, moment updates of the
//! variance components, and the profiled effective weight matrix.
//!
//! All q x q systems are solved by symmetric positive-definite factorization;
//! q is small, so no iterative solvers. Per-subject work is independent, and
//! cross-subject reductions use pairwise summation so results are bit-stable
//! regardless of how the per-subject pieces were produced.

use crate::data_model::{FixedEffects, RandomEffectsCov, SubjectBlock, D_MIN};
use crate::numerics::{pairwise_sum, Mat, NumericsError, SpdFactor};
use crate::weighting::WeightState;
use thiserror::Error;

/// Floor applied to the residual variance update.
pub const SIGMA2_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MixedEffectsError {
    #[error("singular posterior system: {0}")]
    SingularSystem(NumericsError),
}

/// One subject's posterior: point prediction and covariance of the random
/// effect given the current weights, covariance, and fixed effects.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPosterior {
    pub b_hat: Vec<f64>,
    pub v: Mat,
}

/// The profiled weight matrix W_i - W_i Z_i (Z_i' W_i Z_i + D^{-1})^{-1} Z_i' W_i.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveWeights {
    pub w_tilde: Mat,
}

/// Pre-factored pieces of one subject's posterior system that depend on the
/// weights and covariance but not on beta, so multiple right-hand sides can
/// reuse the factorization.
pub struct RebSystem<'a> {
    block: &'a SubjectBlock,
    weights: &'a [f64],
    factor: SpdFactor,
}

impl<'a> RebSystem<'a> {
    pub fn new(
        block: &'a SubjectBlock,
        weights: &'a [f64],
        d: &RandomEffectsCov,
    ) -> Result<Self, MixedEffectsError> {
        assert_eq!(weights.len(), block.n_obs());
        let q = block.z.ncols();
        let d_work = d.floored(D_MIN);
        let d_inv = SpdFactor::new(d_work.matrix())
            .map_err(MixedEffectsError::SingularSystem)?
            .inverse();
        // A = Z' W Z + D^{-1}
        let mut a = d_inv;
        for t in 0..block.n_obs() {
            let w = weights[t];
            if w == 0.0 {
                continue;
            }
            let zrow = block.z.row(t);
            for r in 0..q {
                for c in 0..q {
                    a[(r, c)] += w * zrow[r] * zrow[c];
                }
            }
        }
        let factor = SpdFactor::new(&a).map_err(MixedEffectsError::SingularSystem)?;
        Ok(RebSystem {
            block,
            weights,
            factor,
        })
    }

    /// Posterior for the given fixed effects: solves A b = Z' W (y - X beta).
    pub fn posterior(&self, beta: &FixedEffects) -> SubjectPosterior {
        let q = self.block.z.ncols();
        let mut rhs = vec![0.0; q];
        for t in 0..self.block.n_obs() {
            let w = self.weights[t];
            if w == 0.0 {
                continue;
            }
            let resid = self.block.y[t] - crate::numerics::dot(self.block.x.row(t), &beta.beta);
            let zrow = self.block.z.row(t);
            for r in 0..q {
                rhs[r] += w * zrow[r] * resid;
            }
        }
        SubjectPosterior {
            b_hat: self.factor.solve(&rhs),
            v: self.factor.inverse(),
        }
    }
}

/// Robust empirical-Bayes update for one subject: the closed-form minimizer of
/// the weighted ridge criterion, plus its posterior covariance
/// V = (Z' W Z + D^{-1})^{-1}.
pub fn reb_update(
    block: &SubjectBlock,
    weights: &[f64],
    d: &RandomEffectsCov,
    beta: &FixedEffects,
) -> Result<SubjectPosterior, MixedEffectsError> {
    Ok(RebSystem::new(block, weights, d)?.posterior(beta))
}

/// Moment update of the random-effects covariance:
/// D = (1/n) sum_i (b_i b_i' + V_i), eigenvalue-floored afterwards.
pub fn update_d(posteriors: &[SubjectPosterior]) -> RandomEffectsCov {
    assert!(!posteriors.is_empty());
    let q = posteriors[0].v.nrows();
    let n = posteriors.len() as f64;
    let mut avg = Mat::zeros(q, q);
    for r in 0..q {
        for c in 0..q {
            let terms: Vec<f64> = posteriors
                .iter()
                .map(|p| p.b_hat[r] * p.b_hat[c] + p.v[(r, c)])
                .collect();
            avg[(r, c)] = pairwise_sum(&terms) / n;
        }
    }
    // Symmetric PSD by construction up to roundoff; the constructor clamps.
    RandomEffectsCov::new(avg)
        .expect("moment average is symmetric PSD")
        .floored(D_MIN)
}

/// Moment update of the residual variance:
/// sigma^2 = (1/N) sum_i ( ||W^{1/2} e_i||^2 + tr(W Z V Z') ), floored.
pub fn update_sigma2(
    dataset: &crate::data_model::LongitudinalDataset,
    beta: &FixedEffects,
    posteriors: &[SubjectPosterior],
    weights: &WeightState,
) -> f64 {
    assert_eq!(posteriors.len(), dataset.n_subjects());
    let n_total = dataset.total_obs() as f64;
    let mut contributions = Vec::with_capacity(dataset.n_subjects());
    let mut offset = 0;
    for (s, post) in dataset.subjects.iter().zip(posteriors) {
        let mut acc = 0.0;
        for t in 0..s.n_obs() {
            let w = weights.weights[offset + t];
            if w == 0.0 {
                continue;
            }
            let fit = crate::numerics::dot(s.x.row(t), &beta.beta)
                + crate::numerics::dot(s.z.row(t), &post.b_hat);
            let e = s.y[t] - fit;
            // trace term: w_t z_t' V z_t
            let zv = post.v.quad_form(s.z.row(t));
            acc += w * (e * e + zv);
        }
        contributions.push(acc);
        offset += s.n_obs();
    }
    (pairwise_sum(&contributions) / n_total).max(SIGMA2_FLOOR)
}

/// Profiled effective weight matrix for one subject.
///
/// Computed as W - C'C with C = L^{-1} Z' W and L the Cholesky factor of
/// Z' W Z + D^{-1}, which is symmetric by construction. Eigenvalue bounds
/// (PSD, dominated by W, operator norm <= 1) are checked in debug builds.
pub fn effective_weights(
    block: &SubjectBlock,
    weights: &[f64],
    d: &RandomEffectsCov,
) -> Result<EffectiveWeights, MixedEffectsError> {
    assert_eq!(weights.len(), block.n_obs());
    let t_len = block.n_obs();
    let q = block.z.ncols();
    let system = RebSystem::new(block, weights, d)?;
    // B = Z' W  (q x T)
    let mut b = Mat::zeros(q, t_len);
    for t in 0..t_len {
        let w = weights[t];
        let zrow = block.z.row(t);
        for r in 0..q {
            b[(r, t)] = w * zrow[r];
        }
    }
    // C = L^{-1} B, column by column.
    let mut c = Mat::zeros(q, t_len);
    for t in 0..t_len {
        let col: Vec<f64> = (0..q).map(|r| b[(r, t)]).collect();
        let y = system.factor.forward_solve(&col);
        for r in 0..q {
            c[(r, t)] = y[r];
        }
    }
    let mut w_tilde = Mat::zeros(t_len, t_len);
    for s in 0..t_len {
        for t in s..t_len {
            let mut v = 0.0;
            for r in 0..q {
                v += c[(r, s)] * c[(r, t)];
            }
            let base = if s == t { weights[s] } else { 0.0 };
            w_tilde[(s, t)] = base - v;
            w_tilde[(t, s)] = base - v;
        }
    }
    #[cfg(debug_assertions)]
    {
        let (vals, _) = crate::numerics::sym_eigen(&w_tilde);
        for &v in &vals {
            debug_assert!(
                (-1e-10..=1.0 + 1e-10).contains(&v),
                "effective weight eigenvalue {v} out of [0, 1]"
            );
        }
        let diff = Mat::diag(weights).sub(&w_tilde);
        let (dvals, _) = crate::numerics::sym_eigen(&diff);
        debug_assert!(dvals[0] >= -1e-10, "W - W~ not PSD: min eig {}", dvals[0]);
    }
    Ok(EffectiveWeights { w_tilde })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn random_block(rng: &mut RngStream, t: usize, p: usize, q: usize) -> SubjectBlock {
        let x = Mat::from_rows(&(0..t).map(|_| (0..p).map(|_| rng.normal()).collect()).collect::<Vec<_>>());
        let z = Mat::from_rows(&(0..t).map(|_| (0..q).map(|_| rng.normal()).collect()).collect::<Vec<_>>());
        SubjectBlock {
            id: "r".into(),
            times: (0..t).map(|k| k as f64 + 1.0).collect(),
            y: (0..t).map(|_| rng.normal()).collect(),
            x,
            z,
        }
    }

    fn random_pd_cov(rng: &mut RngStream, q: usize) -> RandomEffectsCov {
        let g = Mat::from_rows(
            &(0..q)
                .map(|_| (0..q).map(|_| rng.normal()).collect())
                .collect::<Vec<_>>(),
        );
        let a = g.matmul(&g.transpose()).add(&Mat::identity(q).scale(0.3));
        RandomEffectsCov::new(a).unwrap()
    }

    /// Gauss-Jordan inverse, independent of the Cholesky path.
    fn gj_inverse(a: &Mat) -> Mat {
        let n = a.nrows();
        let mut aug = Mat::zeros(n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                aug[(i, j)] = a[(i, j)];
            }
            aug[(i, n + i)] = 1.0;
        }
        for col in 0..n {
            let mut piv = col;
            for r in (col + 1)..n {
                if aug[(r, col)].abs() > aug[(piv, col)].abs() {
                    piv = r;
                }
            }
            for j in 0..2 * n {
                let tmp = aug[(col, j)];
                aug[(col, j)] = aug[(piv, j)];
                aug[(piv, j)] = tmp;
            }
            let d = aug[(col, col)];
            for j in 0..2 * n {
                aug[(col, j)] /= d;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = aug[(r, col)];
                for j in 0..2 * n {
                    aug[(r, j)] -= f * aug[(col, j)];
                }
            }
        }
        let mut inv = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                inv[(i, j)] = aug[(i, n + j)];
            }
        }
        inv
    }

    #[test]
    fn zero_weights_give_prior_posterior() {
        let mut rng = RngStream::new(1, 0);
        let block = random_block(&mut rng, 4, 2, 2);
        let d = RandomEffectsCov::diagonal(&[1.0, 0.25]);
        let post = reb_update(&block, &[0.0; 4], &d, &FixedEffects::zeros(2)).unwrap();
        assert!(post.b_hat.iter().all(|&v| v == 0.0));
        let diff = post.v.sub(d.matrix()).frobenius_norm();
        assert!(diff < 1e-12, "V should equal D, diff {diff}");
    }

    #[test]
    fn scalar_case_closed_form() {
        // T=1, q=1, w=1, z=1, D=d, residual e: b = e d/(1+d), V = d/(1+d).
        let block = SubjectBlock {
            id: "s".into(),
            times: vec![1.0],
            y: vec![0.7],
            x: Mat::from_rows(&[vec![0.0]]),
            z: Mat::from_rows(&[vec![1.0]]),
        };
        let dval = 2.5;
        let d = RandomEffectsCov::diagonal(&[dval]);
        let post = reb_update(&block, &[1.0], &d, &FixedEffects::zeros(1)).unwrap();
        assert!((post.b_hat[0] - 0.7 * dval / (1.0 + dval)).abs() < 1e-12);
        assert!((post.v[(0, 0)] - dval / (1.0 + dval)).abs() < 1e-12);
        // Effective weight 1/(1+d) <= 1.
        let ew = effective_weights(&block, &[1.0], &d).unwrap();
        assert!((ew.w_tilde[(0, 0)] - 1.0 / (1.0 + dval)).abs() < 1e-12);
    }

    #[test]
    fn reb_matches_dense_normal_equation_oracle() {
        let mut rng = RngStream::new(2, 0);
        for _ in 0..50 {
            let block = random_block(&mut rng, 5, 3, 2);
            let d = random_pd_cov(&mut rng, 2);
            let w: Vec<f64> = (0..5).map(|_| rng.uniform()).collect();
            let beta = FixedEffects {
                beta: (0..3).map(|_| rng.normal()).collect(),
            };
            let post = reb_update(&block, &w, &d, &beta).unwrap();

            // Oracle: explicit A and rhs, Gauss-Jordan solve.
            let q = 2;
            let mut a = gj_inverse(d.matrix());
            let mut rhs = vec![0.0; q];
            for t in 0..5 {
                let zr = block.z.row(t);
                let resid = block.y[t] - crate::numerics::dot(block.x.row(t), &beta.beta);
                for r in 0..q {
                    rhs[r] += w[t] * zr[r] * resid;
                    for c in 0..q {
                        a[(r, c)] += w[t] * zr[r] * zr[c];
                    }
                }
            }
            let a_inv = gj_inverse(&a);
            let b_star = a_inv.matvec(&rhs);
            for r in 0..q {
                assert!((post.b_hat[r] - b_star[r]).abs() < 1e-10);
            }
            // Gradient of the ridge criterion at b_hat is ~0.
            let mut grad = vec![0.0; q];
            let dinv = gj_inverse(d.matrix());
            for t in 0..5 {
                let zr = block.z.row(t);
                let resid = block.y[t]
                    - crate::numerics::dot(block.x.row(t), &beta.beta)
                    - crate::numerics::dot(zr, &post.b_hat);
                for r in 0..q {
                    grad[r] += -2.0 * w[t] * zr[r] * resid;
                }
            }
            let db = dinv.matvec(&post.b_hat);
            for r in 0..q {
                grad[r] += 2.0 * db[r];
                assert!(grad[r].abs() < 1e-8, "gradient {} at coord {r}", grad[r]);
            }
        }
    }

    #[test]
    fn update_d_single_subject_arithmetic() {
        let post = SubjectPosterior {
            b_hat: vec![1.0, 0.0],
            v: Mat::diag(&[0.5, 0.5]),
        };
        let d = update_d(&[post]);
        assert!((d.matrix()[(0, 0)] - 1.5).abs() < 1e-15);
        assert!((d.matrix()[(1, 1)] - 0.5).abs() < 1e-15);
        assert_eq!(d.matrix()[(0, 1)], 0.0);
    }

    #[test]
    fn update_d_constant_average_and_loop_oracle() {
        let posts: Vec<SubjectPosterior> = (0..7)
            .map(|_| SubjectPosterior {
                b_hat: vec![0.0, 0.0],
                v: Mat::identity(2),
            })
            .collect();
        let d = update_d(&posts);
        assert!(d.matrix().sub(&Mat::identity(2)).frobenius_norm() < 1e-14);

        let mut rng = RngStream::new(3, 0);
        let posts: Vec<SubjectPosterior> = (0..20)
            .map(|_| {
                let b: Vec<f64> = (0..2).map(|_| rng.normal()).collect();
                let v = random_pd_cov(&mut rng, 2);
                SubjectPosterior {
                    b_hat: b,
                    v: v.matrix().clone(),
                }
            })
            .collect();
        let d = update_d(&posts);
        let mut naive = Mat::zeros(2, 2);
        for p in &posts {
            for r in 0..2 {
                for c in 0..2 {
                    naive[(r, c)] += (p.b_hat[r] * p.b_hat[c] + p.v[(r, c)]) / 20.0;
                }
            }
        }
        assert!(d.matrix().sub(&naive).frobenius_norm() < 1e-12);
    }

    #[test]
    fn update_sigma2_reduces_to_mse_without_z() {
        use crate::data_model::LongitudinalDataset;
        let mut rng = RngStream::new(4, 0);
        let mut subjects = Vec::new();
        for i in 0..4 {
            let mut b = random_block(&mut rng, 3, 2, 1);
            b.id = format!("s{i}");
            // Z columns all zero: trace term vanishes, b_hat irrelevant.
            b.z = Mat::zeros(3, 1);
            subjects.push(b);
        }
        let data = LongitudinalDataset {
            subjects,
            p: 2,
            q: 1,
        };
        let beta = FixedEffects::zeros(2);
        let posts: Vec<SubjectPosterior> = data
            .subjects
            .iter()
            .map(|_| SubjectPosterior {
                b_hat: vec![0.0],
                v: Mat::identity(1),
            })
            .collect();
        let weights = WeightState::ones(data.total_obs());
        let got = update_sigma2(&data, &beta, &posts, &weights);
        let mut sq = 0.0;
        for s in &data.subjects {
            for t in 0..s.n_obs() {
                sq += s.y[t] * s.y[t];
            }
        }
        let want = sq / data.total_obs() as f64;
        assert!((got - want).abs() < 1e-12);

        // Perfect fit with zero Z rows floors at SIGMA2_FLOOR.
        let mut perfect = data.clone();
        for s in &mut perfect.subjects {
            s.y = vec![0.0; s.n_obs()];
        }
        let got = update_sigma2(&perfect, &beta, &posts, &weights);
        assert_eq!(got, SIGMA2_FLOOR);
    }

    #[test]
    fn update_sigma2_matches_naive_loop() {
        use crate::data_model::LongitudinalDataset;
        let mut rng = RngStream::new(5, 0);
        let subjects: Vec<SubjectBlock> = (0..6)
            .map(|i| {
                let mut b = random_block(&mut rng, 4, 2, 2);
                b.id = format!("s{i}");
                b
            })
            .collect();
        let data = LongitudinalDataset {
            subjects,
            p: 2,
            q: 2,
        };
        let beta = FixedEffects {
            beta: vec![0.3, -0.8],
        };
        let d = random_pd_cov(&mut rng, 2);
        let w: Vec<f64> = (0..data.total_obs()).map(|_| rng.uniform()).collect();
        let state = WeightState {
            weights: w.clone(),
            residuals: vec![0.0; w.len()],
            leverage: vec![0.0; w.len()],
            delta: 0.5,
        };
        let posts: Vec<SubjectPosterior> = {
            let mut out = Vec::new();
            let mut off = 0;
            for s in &data.subjects {
                out.push(reb_update(s, &w[off..off + s.n_obs()], &d, &beta).unwrap());
                off += s.n_obs();
            }
            out
        };
        let got = update_sigma2(&data, &beta, &posts, &state);
        let mut naive = 0.0;
        let mut off = 0;
        for (s, post) in data.subjects.iter().zip(&posts) {
            for t in 0..s.n_obs() {
                let e = s.y[t]
                    - crate::numerics::dot(s.x.row(t), &beta.beta)
                    - crate::numerics::dot(s.z.row(t), &post.b_hat);
                let zv = post.v.quad_form(s.z.row(t));
                naive += w[off + t] * (e * e + zv);
            }
            off += s.n_obs();
        }
        naive /= data.total_obs() as f64;
        assert!((got - naive).abs() < 1e-12 * naive.max(1.0));
    }

    #[test]
    fn effective_weights_zero_when_weights_zero() {
        let mut rng = RngStream::new(6, 0);
        let block = random_block(&mut rng, 4, 2, 2);
        let d = random_pd_cov(&mut rng, 2);
        let ew = effective_weights(&block, &[0.0; 4], &d).unwrap();
        assert!(ew.w_tilde.frobenius_norm() < 1e-14);
    }

    #[test]
    fn lemma_properties_on_200_random_instances() {
        let mut rng = RngStream::new(7, 0);
        for _ in 0..200 {
            let t = 1 + rng.below(8);
            let q = 1 + rng.below(3);
            let block = random_block(&mut rng, t, 2, q);
            let d = random_pd_cov(&mut rng, q);
            let w: Vec<f64> = (0..t).map(|_| rng.uniform()).collect();
            let ew = effective_weights(&block, &w, &d).unwrap().w_tilde;
            let (vals, _) = crate::numerics::sym_eigen(&ew);
            assert!(vals[0] >= -1e-10, "min eigenvalue {}", vals[0]);
            assert!(
                vals[vals.len() - 1] <= 1.0 + 1e-10,
                "max eigenvalue {}",
                vals[vals.len() - 1]
            );
            let diff = Mat::diag(&w).sub(&ew);
            let (dvals, _) = crate::numerics::sym_eigen(&diff);
            assert!(dvals[0] >= -1e-10, "W - W~ min eig {}", dvals[0]);
        }
    }

    #[test]
    fn profiling_identity_on_random_instances() {
        // (y - X beta)' W~ (y - X beta) equals the minimized ridge criterion.
        let mut rng = RngStream::new(8, 0);
        for _ in 0..50 {
            let t = 2 + rng.below(6);
            let q = 1 + rng.below(3);
            let block = random_block(&mut rng, t, 2, q);
            let d = random_pd_cov(&mut rng, q);
            let w: Vec<f64> = (0..t).map(|_| rng.uniform()).collect();
            let beta = FixedEffects {
                beta: vec![rng.normal(), rng.normal()],
            };
            let resid: Vec<f64> = (0..t)
                .map(|k| block.y[k] - crate::numerics::dot(block.x.row(k), &beta.beta))
                .collect();
            let ew = effective_weights(&block, &w, &d).unwrap().w_tilde;
            let lhs = ew.quad_form(&resid);

            let post = reb_update(&block, &w, &d, &beta).unwrap();
            let dinv = gj_inverse(d.matrix());
            let mut rhs_val = dinv.quad_form(&post.b_hat);
            for k in 0..t {
                let e = resid[k] - crate::numerics::dot(block.z.row(k), &post.b_hat);
                rhs_val += w[k] * e * e;
            }
            assert!(
                (lhs - rhs_val).abs() <= 1e-8 * (1.0 + lhs.abs()),
                "profiling identity: {lhs} vs {rhs_val}"
            );
        }
    }

    #[test]
    fn profiled_curvature_matches_explicit_minimization() {
        // Delta' X' W~ X Delta equals the profiled objective curvature.
        let mut rng = RngStream::new(9, 0);
        for _ in 0..20 {
            let t = 3 + rng.below(4);
            let q = 1 + rng.below(2);
            let block = random_block(&mut rng, t, 3, q);
            let d = random_pd_cov(&mut rng, q);
            let w: Vec<f64> = (0..t).map(|_| rng.uniform()).collect();
            let delta: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let xd: Vec<f64> = (0..t)
                .map(|k| crate::numerics::dot(block.x.row(k), &delta))
                .collect();
            let ew = effective_weights(&block, &w, &d).unwrap().w_tilde;
            let lhs = ew.quad_form(&xd);

            // min over b of ||W^{1/2}(X Delta - Z b)||^2 + b' D^{-1} b via the
            // REB machinery on a synthetic response.
            let synth = SubjectBlock {
                id: "q".into(),
                times: block.times.clone(),
                y: xd.clone(),
                x: Mat::zeros(t, 3),
                z: block.z.clone(),
            };
            let post = reb_update(&synth, &w, &d, &FixedEffects::zeros(3)).unwrap();
            let dinv = gj_inverse(d.matrix());
            let mut min_val = dinv.quad_form(&post.b_hat);
            for k in 0..t {
                let e = xd[k] - crate::numerics::dot(block.z.row(k), &post.b_hat);
                min_val += w[k] * e * e;
            }
            assert!(
                (lhs - min_val).abs() <= 1e-9 * (1.0 + lhs.abs()),
                "curvature {lhs} vs profile minimum {min_val}"
            );
        }
    }
}
