//! One-layer linear attention for in-context linear regression.
//!
//! With the value and query-key matrices constrained so that their bottom-left
//! `1 × d` blocks vanish, the attention output read at the query's label slot
//! collapses to
//!
//! ```text
//! μ̂(x) = 1/(t+1) · Ȳᵀ X̄ Γᵀ x
//! ```
//!
//! for `t` context pairs, where `Γᵀ = W v`. The predictive variance is not
//! learned here; it is taken from the conjugate oracle.

mod io;
mod pretrain;
mod risk;

pub use io::{read_gamma, write_gamma, GammaFile, GammaProvenance};
pub use pretrain::{mc_pretrain_risk, mc_pretrain_risk_diff, optimal_gamma, pretrain_moments, PretrainMoments, RiskDivisor};
pub use risk::{excess_risk_limit, excess_risk_step, excess_risk_step_with, McEstimate, StepMean};

use crate::blr::Trajectory;
use crate::error::{check_dim, Error, Result};
use crate::mathkit::{Matrix, Vector};

#[derive(Clone, Debug, PartialEq)]
pub struct LinAttnModel {
    gamma: Matrix,
}

impl LinAttnModel {
    pub fn new(gamma: Matrix) -> Result<Self> {
        if !gamma.is_square() || gamma.nrows() == 0 {
            return Err(Error::Config("gamma must be a non-empty square matrix".into()));
        }
        if gamma.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gamma".into()));
        }
        Ok(Self { gamma })
    }

    /// `Γ = H⁻¹`, the length-generalizing choice.
    pub fn inverse_of(h: &Matrix) -> Result<Self> {
        Self::new(crate::mathkit::spd_inverse(h)?)
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            gamma: Matrix::zeros(d, d),
        }
    }

    pub fn d(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn gamma(&self) -> &Matrix {
        &self.gamma
    }

    /// `μ̂(x) = (1/(n+1)) · sᵀ Γᵀ x` for a context with `n` pairs and
    /// `s = Σ y_j x_j`.
    pub fn mean_from_stats(&self, xty: &Vector, n: usize, x: &[f64]) -> f64 {
        let gs = &self.gamma * xty;
        gs.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / (n + 1) as f64
    }

    /// Mean prediction for query `x` after context `ctx`.
    pub fn predict_mean(&self, ctx: &Trajectory, x: &[f64]) -> Result<f64> {
        check_dim(self.d(), ctx.dim())?;
        check_dim(self.d(), x.len())?;
        if ctx.is_empty() {
            return Ok(0.0);
        }
        Ok(self.mean_from_stats(&ctx.xty(), ctx.len(), x))
    }
}

/// Residual single-head linear self-attention evaluated literally on the
/// token matrix
///
/// ```text
/// Z = [ x_1 … x_t  x ]
///     [ y_1 … y_t  0 ]
/// ```
///
/// returning entry `(d+1, t+1)` of `Z + (1/(t+1)) (VZ)(ZᵀQᵀK Z)`. `qk` is the
/// product `QᵀK`. Both `v` and `qk` must have a zero bottom-left `1 × d` block.
pub fn attn_forward_explicit(v: &Matrix, qk: &Matrix, ctx: &Trajectory, x: &[f64]) -> Result<f64> {
    let d = ctx.dim();
    check_dim(d, x.len())?;
    for m in [v, qk] {
        if m.nrows() != d + 1 || m.ncols() != d + 1 {
            return Err(Error::Dimension {
                expected: d + 1,
                got: m.nrows(),
            });
        }
        if (0..d).any(|j| m[(d, j)] != 0.0) {
            return Err(Error::Contract("bottom-left 1×d block of V and QᵀK must be zero".into()));
        }
    }
    let t = ctx.len();
    let mut z = Matrix::zeros(d + 1, t + 1);
    for (j, (xj, yj)) in ctx.pairs().enumerate() {
        z.view_mut((0, j), (d, 1)).copy_from_slice(xj);
        z[(d, j)] = yj;
    }
    z.view_mut((0, t), (d, 1)).copy_from_slice(x);
    let attn = (v * &z) * (z.transpose() * qk * &z) / (t + 1) as f64;
    Ok(z[(d, t)] + attn[(d, t)])
}
