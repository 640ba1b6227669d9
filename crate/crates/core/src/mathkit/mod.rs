//! Shared numerical kernels.

mod gaussian;
mod linalg;
mod rng;

pub use gaussian::{erfc, fit_gaussian, kl_gaussian1, kl_gaussian_n, Gaussian1, GaussianN, MvnSampler};
pub(crate) use gaussian::kl_gaussian1_unchecked;
pub use linalg::{
    cholesky_lower, is_symmetric, lu_solve_matrix, spd_inverse, spd_log_det, spd_solve, spd_solve_matrix, Matrix,
    Vector,
};
#[cfg(test)]
pub(crate) use linalg::random_spd;
pub use rng::RngStream;

/// Mean and standard error of a sample.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Empirical quantile with linear interpolation between order statistics
/// (the "type 7" rule). `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
