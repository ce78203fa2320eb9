//! Shared deterministic numerical kernels.
//!
//! Everything in here is dependency-light and platform-stable: seeded
//! counter-mode RNG streams, normal/chi-square CDFs and quantiles built on the
//! regularized incomplete gamma function, symmetric positive-definite
//! factorizations for the small systems the estimator solves, and pairwise
//! summation for deterministic reductions.

mod linalg;
mod rng;
mod special;

pub use linalg::{sym_eigen, Mat, SpdFactor};
pub use rng::RngStream;
pub use special::{chi2_cdf, chi2_quantile, erf, half_normal_cdf, normal_cdf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("argument out of domain: {0}")]
    Domain(String),
}

/// Sums a slice by recursive pairwise reduction.
///
/// The result depends only on the order of `values`, never on chunking or
/// thread count, and carries an O(log n) rounding-error factor instead of the
/// O(n) of a left fold.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BASE: usize = 32;
    if values.len() <= BASE {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Dot product of two equal-length slices (sequential, deterministic).
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Lower median of an empirical sample (linear interpolation at the midpoint).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median absolute deviation about the median (unscaled).
pub fn mad(values: &[f64]) -> f64 {
    let m = median(values);
    let dev: Vec<f64> = values.iter().map(|&x| (x - m).abs()).collect();
    median(&dev)
}

/// Type-7 (linear interpolation) quantile of a sample, `prob` in [0, 1].
pub fn quantile(values: &[f64], prob: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty slice");
    assert!((0.0..=1.0).contains(&prob));
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    }
}

/// Consistency scaling constant for the MAD under a normal model.
pub const MAD_NORMAL_CONSISTENCY: f64 = 1.4826;
