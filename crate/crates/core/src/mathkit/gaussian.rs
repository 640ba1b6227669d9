//! Univariate and multivariate Gaussians, KL divergences and moment fitting.

use serde::{Deserialize, Serialize};

use super::linalg::{cholesky, cholesky_lower, spd_log_det, Matrix, Vector};
use super::RngStream;
use crate::error::{check_dim, Error, Result};

/// A univariate normal, parameterized by mean and variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian1 {
    pub mean: f64,
    pub var: f64,
}

impl Gaussian1 {
    pub fn new(mean: f64, var: f64) -> Result<Self> {
        let g = Self { mean, var };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mean.is_finite() {
            return Err(Error::Domain(format!("non-finite mean {}", self.mean)));
        }
        if !(self.var > 0.0 && self.var.is_finite()) {
            return Err(Error::Domain(format!("variance must be positive and finite, got {}", self.var)));
        }
        Ok(())
    }

    pub fn log_pdf(&self, y: f64) -> f64 {
        let r = y - self.mean;
        -0.5 * ((2.0 * std::f64::consts::PI * self.var).ln() + r * r / self.var)
    }

    pub fn cdf(&self, y: f64) -> f64 {
        0.5 * erfc(-(y - self.mean) / (2.0 * self.var).sqrt())
    }

    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        self.mean + self.var.sqrt() * rng.normal()
    }
}

/// A multivariate normal with dense covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianN {
    pub mean: Vector,
    pub cov: Matrix,
}

impl GaussianN {
    pub fn new(mean: Vector, cov: Matrix) -> Result<Self> {
        check_dim(mean.len(), cov.nrows())?;
        check_dim(mean.len(), cov.ncols())?;
        cholesky(&cov)?;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sampler(&self) -> Result<MvnSampler> {
        MvnSampler::new(self.mean.clone(), &self.cov)
    }
}

/// Draws from `N(mean, L Lᵀ)` with a precomputed Cholesky factor.
#[derive(Clone, Debug)]
pub struct MvnSampler {
    mean: Vector,
    chol: Matrix,
}

impl MvnSampler {
    pub fn new(mean: Vector, cov: &Matrix) -> Result<Self> {
        check_dim(mean.len(), cov.nrows())?;
        Ok(Self {
            mean,
            chol: cholesky_lower(cov)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vector {
        let mut out = self.mean.clone();
        self.sample_into(rng, out.as_mut_slice());
        out
    }

    /// Writes one draw into `out` (length `dim`).
    pub fn sample_into(&self, rng: &mut RngStream, out: &mut [f64]) {
        let d = self.dim();
        let z: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for i in 0..d {
            let mut acc = self.mean[i];
            for (j, zj) in z.iter().enumerate().take(i + 1) {
                acc += self.chol[(i, j)] * zj;
            }
            out[i] = acc;
        }
    }
}

/// `KL(p ‖ q)` between univariate normals, in the variance form.
pub fn kl_gaussian1(p: &Gaussian1, q: &Gaussian1) -> Result<f64> {
    p.validate()?;
    q.validate()?;
    Ok(kl_gaussian1_unchecked(p.mean, p.var, q.mean, q.var))
}

#[inline]
pub(crate) fn kl_gaussian1_unchecked(mp: f64, vp: f64, mq: f64, vq: f64) -> f64 {
    let dm = mp - mq;
    0.5 * (vq / vp).ln() + (vp + dm * dm) / (2.0 * vq) - 0.5
}

/// `KL(p ‖ q)` between multivariate normals.
pub fn kl_gaussian_n(p: &GaussianN, q: &GaussianN) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    let d = p.dim();
    let chol_q = cholesky(&q.cov)?;
    let log_det_p = spd_log_det(&p.cov)?;
    let log_det_q = spd_log_det(&q.cov)?;
    let trace = chol_q.solve(&p.cov).trace();
    let diff = &q.mean - &p.mean;
    let maha = diff.dot(&chol_q.solve(&diff));
    Ok(0.5 * (trace + maha - d as f64 + log_det_q - log_det_p))
}

/// Moment-matched Gaussian: sample mean and unbiased sample covariance.
///
/// If the covariance fails to factor, `1e-9 × mean diagonal` is added to the
/// diagonal once; a sample set that still fails (or has a zero diagonal) is
/// reported as degenerate.
pub fn fit_gaussian(samples: &[Vector]) -> Result<GaussianN> {
    let d = samples.first().map(|s| s.len()).unwrap_or(1);
    if samples.len() < d + 2 {
        return Err(Error::TooFewSamples {
            needed: d + 2,
            got: samples.len(),
        });
    }
    for s in samples {
        check_dim(d, s.len())?;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample".into()));
        }
    }
    let n = samples.len() as f64;
    let mean = samples.iter().fold(Vector::zeros(d), |acc, s| acc + s) / n;
    let mut cov = Matrix::zeros(d, d);
    for s in samples {
        let c = s - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= n - 1.0;
    cov = (&cov + cov.transpose()) * 0.5;
    if cholesky(&cov).is_ok() {
        return Ok(GaussianN { mean, cov });
    }
    let eps = 1e-9 * cov.trace() / d as f64;
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Degenerate);
    }
    for i in 0..d {
        cov[(i, i)] += eps;
    }
    cholesky(&cov).map_err(|_| Error::Degenerate)?;
    Ok(GaussianN { mean, cov })
}

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}
