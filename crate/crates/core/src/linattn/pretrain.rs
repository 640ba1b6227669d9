//! Population pre-training of the linear-attention predictor.
//!
//! Writing `s_t = X̄ᵀ_t Ȳ_t` for the first `t` pairs, the per-step moments are
//!
//! ```text
//! H̃_t = E[(s_t/t)(s_t/t)ᵀ] = τ² H ((tr H + σ²/τ²)/t · I + (t+1)/t · H)
//! Γ̃_t = t ((tr H + σ²/τ²) I + (t+1) H)⁻¹
//! ```
//!
//! and the multi-task minimizer is `Γ* = (Σ_t H̃_t)⁻¹ Σ_t H̃_t Γ̃_t` over
//! `t = 1 … T_pt − 1`. The `t = 0` step has an empty context, predicts zero
//! for every `Γ` and so drops out.
//!
//! `H̃_t` and `Γ̃_t` are moments of `s_t / t`, so `Γ*` minimizes the squared
//! one-step risk of the predictor `(1/t) s_tᵀ Γᵀ x` ([`RiskDivisor::ContextLen`]).
//! The attention readout divides by `t + 1` instead; its risk
//! ([`RiskDivisor::ContextLenPlusOne`]) has a different minimizer.

use rayon::prelude::*;

use super::{LinAttnModel, McEstimate};
use crate::blr::BlrEnv;
use crate::error::{Error, Result};
use crate::mathkit::{spd_solve_matrix, Matrix, RngStream, Vector};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainMoments {
    pub t: usize,
    pub h_tilde: Matrix,
    pub gamma_tilde: Matrix,
}

pub fn pretrain_moments(env: &BlrEnv, t: usize) -> Result<PretrainMoments> {
    if t == 0 {
        return Err(Error::Domain("pre-training moments are undefined at t = 0".into()));
    }
    let d = env.d();
    let h = env.h();
    let eye = Matrix::identity(d, d);
    let c = h.trace() + env.sigma2() / env.tau2();
    let tf = t as f64;
    let h_tilde = h * (&eye * (c / tf) + h * ((tf + 1.0) / tf)) * env.tau2();
    let inner = &eye * c + h * (tf + 1.0);
    let gamma_tilde = spd_solve_matrix(&inner, &eye)? * tf;
    Ok(PretrainMoments {
        t,
        h_tilde: symmetrize(h_tilde),
        gamma_tilde: symmetrize(gamma_tilde),
    })
}

fn symmetrize(m: Matrix) -> Matrix {
    (&m + m.transpose()) * 0.5
}

/// `Γ*` for pre-training length `t_pt`.
pub fn optimal_gamma(env: &BlrEnv, t_pt: usize) -> Result<LinAttnModel> {
    if t_pt < 2 {
        return Err(Error::Domain("optimal gamma needs a pre-training length of at least 2".into()));
    }
    let d = env.d();
    let mut sum_h = Matrix::zeros(d, d);
    let mut sum_hg = Matrix::zeros(d, d);
    for t in 1..t_pt {
        let m = pretrain_moments(env, t)?;
        sum_hg += &m.h_tilde * &m.gamma_tilde;
        sum_h += m.h_tilde;
    }
    LinAttnModel::new(spd_solve_matrix(&symmetrize(sum_h), &sum_hg)?)
}

/// Normalization of the context statistic in the pre-training risk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RiskDivisor {
    /// `(1/t) s_tᵀΓᵀx`; the predictor whose risk `Γ*` minimizes.
    ContextLen,
    /// `(1/(t+1)) s_tᵀΓᵀx`; the attention readout.
    ContextLenPlusOne,
}

impl RiskDivisor {
    fn scale(self, t: usize) -> f64 {
        match self {
            RiskDivisor::ContextLen if t == 0 => 0.0,
            RiskDivisor::ContextLen => 1.0 / t as f64,
            RiskDivisor::ContextLenPlusOne => 1.0 / (t + 1) as f64,
        }
    }
}

/// Per-trajectory average squared one-step error over `t = 0 … t_pt − 1`.
fn trajectory_risk(model: &LinAttnModel, env: &BlrEnv, t_pt: usize, divisor: RiskDivisor, rng: &mut RngStream) -> f64 {
    let d = env.d();
    let w = env.sample_w(rng);
    let mut s = Vector::zeros(d);
    let mut x = vec![0.0; d];
    let mut total = 0.0;
    for t in 0..t_pt {
        env.sample_x_into(rng, &mut x);
        let y = env.sample_y(w.as_slice(), &x, rng);
        let pred = if t == 0 {
            0.0
        } else {
            let gs = model.gamma() * &s;
            gs.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() * divisor.scale(t)
        };
        total += (pred - y).powi(2);
        for k in 0..d {
            s[k] += y * x[k];
        }
    }
    total / t_pt as f64
}

fn risk_samples(model: &LinAttnModel, env: &BlrEnv, t_pt: usize, n_traj: usize, divisor: RiskDivisor, rng: &RngStream) -> Result<Vec<f64>> {
    crate::error::check_dim(env.d(), model.d())?;
    if n_traj == 0 || t_pt == 0 {
        return Err(Error::Domain("need at least one trajectory of positive length".into()));
    }
    Ok((0..n_traj as u64)
        .into_par_iter()
        .map(|i| trajectory_risk(model, env, t_pt, divisor, &mut rng.substream(i)))
        .collect())
}

/// Monte Carlo pre-training risk over `n_traj` fresh trajectories.
pub fn mc_pretrain_risk(
    model: &LinAttnModel,
    env: &BlrEnv,
    t_pt: usize,
    n_traj: usize,
    divisor: RiskDivisor,
    rng: &RngStream,
) -> Result<McEstimate> {
    Ok(McEstimate::from_samples(&risk_samples(model, env, t_pt, n_traj, divisor, rng)?))
}

/// `risk(b) − risk(a)` on common random numbers, with the paired standard
/// error.
pub fn mc_pretrain_risk_diff(
    a: &LinAttnModel,
    b: &LinAttnModel,
    env: &BlrEnv,
    t_pt: usize,
    n_traj: usize,
    divisor: RiskDivisor,
    rng: &RngStream,
) -> Result<McEstimate> {
    let ra = risk_samples(a, env, t_pt, n_traj, divisor, rng)?;
    let rb = risk_samples(b, env, t_pt, n_traj, divisor, rng)?;
    let diff: Vec<f64> = rb.iter().zip(&ra).map(|(b, a)| b - a).collect();
    Ok(McEstimate::from_samples(&diff))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env1() -> BlrEnv {
        BlrEnv::isotropic(1, 1.0, 1.0).unwrap()
    }

    fn scalar(g: f64) -> LinAttnModel {
        LinAttnModel::new(Matrix::from_element(1, 1, g)).unwrap()
    }

    #[test]
    fn moments_at_t1() {
        let m = pretrain_moments(&env1(), 1).unwrap();
        assert!((m.h_tilde[(0, 0)] - 4.0).abs() < 1e-15);
        assert!((m.gamma_tilde[(0, 0)] - 0.25).abs() < 1e-15);
        assert!(pretrain_moments(&env1(), 0).is_err());
    }

    #[test]
    fn gamma_tilde_tends_to_h_inverse() {
        let m = pretrain_moments(&env1(), 1_000_000).unwrap();
        assert!((m.gamma_tilde[(0, 0)] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn h_tilde_matches_simulation() {
        let h = Matrix::from_row_slice(2, 2, &[1.2, 0.3, 0.3, 0.7]);
        let env = BlrEnv::new(2, 0.8, 0.5, h).unwrap();
        let t = 5;
        let base = RngStream::new(7, 0);
        let n = 100_000u64;
        let sum: Matrix = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut r = base.substream(i);
                let tr = env.sample_trajectory(t, &mut r).unwrap();
                let s = tr.xty() / t as f64;
                &s * s.transpose()
            })
            .reduce(|| Matrix::zeros(2, 2), |a, b| a + b);
        let mc = sum / n as f64;
        let exact = pretrain_moments(&env, t).unwrap().h_tilde;
        for (a, b) in mc.iter().zip(exact.iter()) {
            assert!((a - b).abs() <= 0.02 * b.abs().max(0.2), "{mc} vs {exact}");
        }
    }

    #[test]
    fn optimal_gamma_small_cases() {
        assert!((optimal_gamma(&env1(), 2).unwrap().gamma()[(0, 0)] - 0.25).abs() < 1e-12);
        assert!((optimal_gamma(&env1(), 3).unwrap().gamma()[(0, 0)] - 4.0 / 13.0).abs() < 1e-12);
        assert!(optimal_gamma(&env1(), 1).is_err());
    }

    /// In one dimension with unit parameters `Γ̃_t = t/(t+3)` and
    /// `H̃_t = (t+3)/t`, so `Γ*_T = (T−1) / (T − 1 + 3 H_{T−1})` with `H_n`
    /// the harmonic number.
    #[test]
    fn optimal_gamma_long_horizon() {
        let t_pt = 512;
        let harmonic: f64 = (1..t_pt).map(|k| 1.0 / k as f64).sum();
        let expected = (t_pt - 1) as f64 / ((t_pt - 1) as f64 + 3.0 * harmonic);
        let g = optimal_gamma(&env1(), t_pt).unwrap().gamma()[(0, 0)];
        assert!((g - expected).abs() < 1e-12);
        assert!((g - 1.0).abs() < 0.05);
    }

    #[test]
    fn first_order_condition() {
        let h = crate::mathkit::random_spd(3, 8.0, &mut RngStream::new(3, 3));
        let env = BlrEnv::new(3, 0.6, 0.4, h).unwrap();
        let t_pt = 17;
        let g = optimal_gamma(&env, t_pt).unwrap();
        let mut grad = Matrix::zeros(3, 3);
        for t in 1..t_pt {
            let m = pretrain_moments(&env, t).unwrap();
            grad += &m.h_tilde * (g.gamma() - &m.gamma_tilde);
        }
        assert!(grad.amax() < 1e-10, "{grad}");
    }

    #[test]
    fn single_step_risk_is_gamma_independent() {
        let env = BlrEnv::isotropic(2, 0.5, 0.3).unwrap();
        let r = RngStream::new(4, 0);
        let a = mc_pretrain_risk(&LinAttnModel::zeros(2), &env, 1, 50_000, RiskDivisor::ContextLen, &r).unwrap();
        let b = mc_pretrain_risk(&LinAttnModel::new(Matrix::identity(2, 2) * 5.0).unwrap(), &env, 1, 50_000, RiskDivisor::ContextLen, &r).unwrap();
        assert_eq!(a, b);
        assert!(a.covers(0.5 * 2.0 + 0.3, 3.0), "{a:?}");
    }

    /// Golden-section search on the Monte Carlo risk (fixed random numbers).
    fn argmin_risk(t_pt: usize, divisor: RiskDivisor) -> f64 {
        let env = env1();
        let r = RngStream::new(11, 0);
        let f = |g: f64| mc_pretrain_risk(&scalar(g), &env, t_pt, 100_000, divisor, &r).unwrap().mean;
        let (mut lo, mut hi) = (-1.0f64, 2.0f64);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..40 {
            let a = hi - phi * (hi - lo);
            let b = lo + phi * (hi - lo);
            if f(a) < f(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn closed_form_matches_numeric_minimizer() {
        assert!((argmin_risk(2, RiskDivisor::ContextLen) - 0.25).abs() < 0.01);
        assert!((argmin_risk(3, RiskDivisor::ContextLen) - 4.0 / 13.0).abs() < 0.01);
    }

    /// With the attention readout's `1/(t+1)` divisor the single-step problem
    /// is minimized at `Γ = 1/2`, not at the closed-form `1/4`.
    #[test]
    fn plus_one_divisor_has_a_different_minimizer() {
        assert!((argmin_risk(2, RiskDivisor::ContextLenPlusOne) - 0.5).abs() < 0.02);
    }

    #[test]
    fn perturbations_increase_risk() {
        let env = env1();
        let t_pt = 8;
        let star = optimal_gamma(&env, t_pt).unwrap();
        let r = RngStream::new(12, 0);
        for sign in [-1.0, 1.0] {
            let other = scalar(star.gamma()[(0, 0)] + 0.1 * sign);
            let diff = mc_pretrain_risk_diff(&star, &other, &env, t_pt, 20_000, RiskDivisor::ContextLen, &r).unwrap();
            assert!(diff.mean > 2.0 * diff.se, "{diff:?}");
        }
    }

    #[test]
    fn near_noiseless_optimum_beats_identity() {
        let env = BlrEnv::isotropic(2, 1.0, 1e-6).unwrap();
        let t_pt = 64;
        let star = optimal_gamma(&env, t_pt).unwrap();
        let id = LinAttnModel::new(Matrix::identity(2, 2)).unwrap();
        let diff = mc_pretrain_risk_diff(&star, &id, &env, t_pt, 20_000, RiskDivisor::ContextLen, &RngStream::new(13, 0)).unwrap();
        assert!(diff.mean > -2.0 * diff.se, "{diff:?}");
    }
}
