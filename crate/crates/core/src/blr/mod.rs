//! Bayesian linear regression: the data-generating process and its exact
//! conjugate oracle.
//!
//! ```text
//! w ~ N(0, τ² I),   X_t ~iid N(0, H),   Y_t = wᵀX_t + ε_t,   ε_t ~iid N(0, σ²)
//! ```

pub(crate) mod io;
mod posterior;

pub use io::{read_trajectory, write_trajectory, TrajectorySidecar, TRAJECTORY_FORMAT_VERSION};
pub use posterior::OraclePosteriorState;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::mathkit::{is_symmetric, Matrix, MvnSampler, RngStream, Vector};

/// The BLR environment: covariate dimension, prior variance, noise variance
/// and covariate second moment `H = E[XXᵀ]`.
#[derive(Clone, Debug)]
pub struct BlrEnv {
    d: usize,
    tau2: f64,
    sigma2: f64,
    h: Matrix,
    covariates: MvnSampler,
}

/// Plain serializable form of [`BlrEnv`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlrEnvParams {
    pub d: usize,
    pub tau2: f64,
    pub sigma2: f64,
    /// Row-major `d × d`; `None` means the identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<Vec<f64>>>,
}

impl BlrEnv {
    pub fn new(d: usize, tau2: f64, sigma2: f64, h: Matrix) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("d must be positive".into()));
        }
        if !(tau2 > 0.0 && tau2.is_finite()) || !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::Config(format!(
                "tau2 and sigma2 must be positive, got tau2={tau2} sigma2={sigma2}"
            )));
        }
        check_dim(d, h.nrows())?;
        check_dim(d, h.ncols())?;
        if !is_symmetric(&h) {
            return Err(Error::Config("H must be symmetric".into()));
        }
        let covariates = MvnSampler::new(Vector::zeros(d), &h).map_err(|_| Error::NotPositiveDefinite)?;
        Ok(Self {
            d,
            tau2,
            sigma2,
            h,
            covariates,
        })
    }

    /// `H = I`.
    pub fn isotropic(d: usize, tau2: f64, sigma2: f64) -> Result<Self> {
        Self::new(d, tau2, sigma2, Matrix::identity(d, d))
    }

    pub fn from_params(p: &BlrEnvParams) -> Result<Self> {
        let h = match &p.h {
            None => Matrix::identity(p.d, p.d),
            Some(rows) => {
                check_dim(p.d, rows.len())?;
                for r in rows {
                    check_dim(p.d, r.len())?;
                }
                Matrix::from_fn(p.d, p.d, |i, j| rows[i][j])
            }
        };
        Self::new(p.d, p.tau2, p.sigma2, h)
    }

    pub fn params(&self) -> BlrEnvParams {
        let identity = self.h == Matrix::identity(self.d, self.d);
        BlrEnvParams {
            d: self.d,
            tau2: self.tau2,
            sigma2: self.sigma2,
            h: (!identity).then(|| (0..self.d).map(|i| self.h.row(i).iter().copied().collect()).collect()),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn tau2(&self) -> f64 {
        self.tau2
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn h(&self) -> &Matrix {
        &self.h
    }

    /// Draws a latent coefficient from the prior `N(0, τ²I)`.
    pub fn sample_w(&self, rng: &mut RngStream) -> Vector {
        let s = self.tau2.sqrt();
        Vector::from_fn(self.d, |_, _| s * rng.normal())
    }

    /// Draws one covariate `x ~ N(0, H)` into `out`.
    pub fn sample_x_into(&self, rng: &mut RngStream, out: &mut [f64]) {
        self.covariates.sample_into(rng, out)
    }

    pub fn sample_x(&self, rng: &mut RngStream) -> Vec<f64> {
        let mut x = vec![0.0; self.d];
        self.sample_x_into(rng, &mut x);
        x
    }

    /// Draws `Y = wᵀx + ε`.
    pub fn sample_y(&self, w: &[f64], x: &[f64], rng: &mut RngStream) -> f64 {
        dot(w, x) + self.sigma2.sqrt() * rng.normal()
    }

    /// Samples a length-`t` trajectory with a fresh latent `w` from the prior.
    pub fn sample_trajectory(&self, t: usize, rng: &mut RngStream) -> Result<Trajectory> {
        let w = self.sample_w(rng);
        self.sample_trajectory_given(w.as_slice(), t, rng)
    }

    /// Samples a length-`t` trajectory for a fixed coefficient `w`.
    pub fn sample_trajectory_given(&self, w: &[f64], t: usize, rng: &mut RngStream) -> Result<Trajectory> {
        if t == 0 {
            return Err(Error::Domain("trajectory length must be at least 1".into()));
        }
        check_dim(self.d, w.len())?;
        let mut traj = Trajectory::with_capacity(self.d, t);
        let mut x = vec![0.0; self.d];
        for _ in 0..t {
            self.sample_x_into(rng, &mut x);
            let y = self.sample_y(w, &x, rng);
            traj.push(&x, y)?;
        }
        traj.w = Some(w.to_vec());
        Ok(traj)
    }

    pub fn prior_state(&self) -> OraclePosteriorState {
        OraclePosteriorState::prior(self)
    }
}

/// A sequence of `(x, y)` pairs. Covariates are stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    d: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    /// Latent coefficient, when the trajectory was generated.
    pub w: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(d: usize) -> Self {
        Self::with_capacity(d, 0)
    }

    pub fn with_capacity(d: usize, t: usize) -> Self {
        Self {
            d,
            x: Vec::with_capacity(d * t),
            y: Vec::with_capacity(t),
            w: None,
        }
    }

    /// Builds from row-major covariates and outcomes.
    pub fn from_parts(d: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("d must be positive".into()));
        }
        if x.len() != d * y.len() {
            return Err(Error::Dimension {
                expected: d * y.len(),
                got: x.len(),
            });
        }
        Ok(Self { d, x, y, w: None })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn y(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn xs(&self) -> &[f64] {
        &self.x
    }

    pub fn ys(&self) -> &[f64] {
        &self.y
    }

    pub fn ys_mut(&mut self) -> &mut [f64] {
        &mut self.y
    }

    pub fn xs_mut(&mut self) -> &mut [f64] {
        &mut self.x
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.x.chunks_exact(self.d).zip(self.y.iter().copied())
    }

    pub fn push(&mut self, x: &[f64], y: f64) -> Result<()> {
        check_dim(self.d, x.len())?;
        self.x.extend_from_slice(x);
        self.y.push(y);
        Ok(())
    }

    /// The first `t` pairs (latent `w` is kept).
    pub fn prefix(&self, t: usize) -> Trajectory {
        let t = t.min(self.len());
        Trajectory {
            d: self.d,
            x: self.x[..t * self.d].to_vec(),
            y: self.y[..t].to_vec(),
            w: self.w.clone(),
        }
    }

    /// Pairs reordered so that output pair `i` is input pair `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Trajectory {
        assert_eq!(perm.len(), self.len());
        let mut out = Trajectory::with_capacity(self.d, self.len());
        for &p in perm {
            out.x.extend_from_slice(self.x(p));
            out.y.push(self.y[p]);
        }
        out.w = self.w.clone();
        out
    }

    /// Covariates as a `T × d` matrix.
    pub fn x_matrix(&self) -> Matrix {
        Matrix::from_row_slice(self.len(), self.d, &self.x)
    }

    pub fn y_vector(&self) -> Vector {
        Vector::from_column_slice(&self.y)
    }

    /// `Σ_j y_j x_j`, i.e. `X̄ᵀȲ`.
    pub fn xty(&self) -> Vector {
        let mut s = Vector::zeros(self.d);
        for (x, y) in self.pairs() {
            for (k, xk) in x.iter().enumerate() {
                s[k] += y * xk;
            }
        }
        s
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
