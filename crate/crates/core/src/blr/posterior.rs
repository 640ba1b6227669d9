use serde::{Deserialize, Serialize};

use super::BlrEnv;
use crate::error::{check_dim, Result};
use crate::mathkit::{spd_inverse, spd_solve, Gaussian1, GaussianN, Matrix, RngStream, Vector};

/// Sufficient statistics of the conjugate posterior over `w`.
///
/// Stores the precision `A_t = X̄ᵀX̄/σ² + I/τ²` and `b_t = X̄ᵀȲ/σ²`; the
/// posterior is `N(A⁻¹b, A⁻¹)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OraclePosteriorState {
    pub a: Matrix,
    pub b: Vector,
    pub t: usize,
    pub sigma2: f64,
}

impl OraclePosteriorState {
    pub fn prior(env: &BlrEnv) -> Self {
        let d = env.d();
        Self {
            a: Matrix::identity(d, d) / env.tau2(),
            b: Vector::zeros(d),
            t: 0,
            sigma2: env.sigma2(),
        }
    }

    /// Absorbs every pair of `traj`, starting from the prior.
    pub fn from_pairs<'a>(env: &BlrEnv, pairs: impl IntoIterator<Item = (&'a [f64], f64)>) -> Result<Self> {
        let mut s = Self::prior(env);
        for (x, y) in pairs {
            s.absorb(x, y)?;
        }
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// Returns the state after observing `(x, y)`; `self` is unchanged.
    pub fn update(&self, x: &[f64], y: f64) -> Result<Self> {
        let mut next = self.clone();
        next.absorb(x, y)?;
        Ok(next)
    }

    /// In-place rank-one update `A += xxᵀ/σ²`, `b += xy/σ²`.
    pub fn absorb(&mut self, x: &[f64], y: f64) -> Result<()> {
        let d = self.dim();
        check_dim(d, x.len())?;
        let inv = 1.0 / self.sigma2;
        for j in 0..d {
            for i in 0..d {
                self.a[(i, j)] += x[i] * x[j] * inv;
            }
            self.b[j] += x[j] * y * inv;
        }
        self.t += 1;
        Ok(())
    }

    /// The posterior `N(A⁻¹b, A⁻¹)` over `w`.
    pub fn posterior(&self) -> Result<GaussianN> {
        let mean = spd_solve(&self.a, &self.b)?;
        let cov = spd_inverse(&self.a)?;
        Ok(GaussianN {
            mean,
            cov: (&cov + cov.transpose()) * 0.5,
        })
    }

    /// The posterior predictive `N(xᵀA⁻¹b, xᵀA⁻¹x + σ²)` for the next outcome.
    pub fn predictive(&self, x: &[f64]) -> Result<Gaussian1> {
        check_dim(self.dim(), x.len())?;
        let xv = Vector::from_column_slice(x);
        let u = spd_solve(&self.a, &xv)?;
        Ok(Gaussian1 {
            mean: u.dot(&self.b),
            var: u.dot(&xv) + self.sigma2,
        })
    }

    /// One draw from [`Self::predictive`].
    pub fn forward_sample(&self, x: &[f64], rng: &mut RngStream) -> Result<f64> {
        Ok(self.predictive(x)?.sample(rng))
    }
}
