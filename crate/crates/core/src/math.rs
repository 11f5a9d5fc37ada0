//! Small numerical helpers: log-sum-exp normalization, guarded Cholesky
//! log-determinants, and the quantile conventions used for posterior
//! summaries.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Log of the sum of exponentials, shifted by the maximum so that
/// normalizing posterior masses cannot overflow. Returns `-inf` when every
/// entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Normalized probabilities from unnormalized log masses. Entries at `-inf`
/// become exactly zero; the result is renormalized to sum to one.
pub fn normalize_log_masses(log_masses: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(log_masses);
    if !lse.is_finite() {
        return Err(Error::ZeroMass);
    }
    let mut masses: Vec<f64> = log_masses.iter().map(|l| (l - lse).exp()).collect();
    let total: f64 = masses.iter().sum();
    for m in &mut masses {
        *m /= total;
    }
    Ok(masses)
}

/// `log det` of a symmetric positive definite matrix via Cholesky. If the
/// factorization fails, a single jitter of `1e-10 * trace / p` is added to
/// the diagonal before giving up.
pub fn log_det_spd(mat: &DMatrix<f64>, context: &str) -> Result<f64> {
    debug_assert_eq!(mat.nrows(), mat.ncols());
    if let Some(chol) = nalgebra::Cholesky::new(mat.clone()) {
        return Ok(chol_log_det(&chol));
    }
    let p = mat.nrows();
    let jitter = 1e-10 * mat.trace() / p as f64;
    let mut jittered = mat.clone();
    for i in 0..p {
        jittered[(i, i)] += jitter;
    }
    match nalgebra::Cholesky::new(jittered) {
        Some(chol) => Ok(chol_log_det(&chol)),
        None => Err(Error::NonPd(context.to_string())),
    }
}

fn chol_log_det(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    let l = chol.l_dirty();
    let mut sum = 0.0;
    for i in 0..l.nrows() {
        sum += l[(i, i)].ln();
    }
    2.0 * sum
}

/// Arithmetic mean of a non-empty slice.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Median by the nearest-rank rule: the smallest value with at least half
/// the sample at or below it.
pub fn median_nearest_rank(sorted: &[f64]) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = (n as f64 * 0.5).ceil() as usize; // 1-based
    sorted[rank.max(1) - 1]
}

/// Quantile by linear interpolation between order statistics at index
/// `p * (n - 1)`.
pub fn quantile_linear(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    debug_assert!((0.0..=1.0).contains(&p));
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Sorted copy of a sample, for feeding the quantile helpers.
pub fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample value"));
    v
}
