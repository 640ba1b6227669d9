use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::LinAttnModel;
use crate::blr::{dot, BlrEnv, OraclePosteriorState};
use crate::error::{check_dim, Error, Result};
use crate::mathkit::{mean_se, Matrix, RngStream, Vector};

/// A Monte Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let (mean, se) = mean_se(values);
        Self {
            mean,
            se,
            n: values.len(),
        }
    }

    /// Whether `value` lies within `k` standard errors of the estimate.
    pub fn covers(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.se
    }
}

/// Which mean predictor is scored at step `t`.
#[derive(Clone, Copy, Debug)]
pub enum StepMean<'a> {
    /// `(1/t) Ȳᵀ_{t−1} X̄_{t−1} Γᵀ x`.
    Gamma(&'a LinAttnModel),
    /// The conjugate posterior mean `xᵀA⁻¹b`.
    Oracle,
}

/// Per-step expected KL between the test law `N(w_qᵀX, σ²)` and the model's
/// predictive `N(μ̂_t(X), σ̂²_t)` at step `t` (after `t − 1` test pairs),
/// estimated with `mc` independent test trajectories. `σ̂²_t` is the oracle
/// variance `σ² + XᵀA⁻¹_{t−1}X`.
pub fn excess_risk_step(
    model: &LinAttnModel,
    env: &BlrEnv,
    w_q: &[f64],
    t: usize,
    mc: usize,
    rng: &RngStream,
) -> Result<McEstimate> {
    check_dim(env.d(), model.d())?;
    excess_risk_step_with(StepMean::Gamma(model), env, w_q, t, mc, rng)
}

pub fn excess_risk_step_with(
    mean: StepMean<'_>,
    env: &BlrEnv,
    w_q: &[f64],
    t: usize,
    mc: usize,
    rng: &RngStream,
) -> Result<McEstimate> {
    check_dim(env.d(), w_q.len())?;
    if t == 0 {
        return Err(Error::Domain("step index starts at 1".into()));
    }
    if mc == 0 {
        return Err(Error::Domain("need at least one Monte Carlo sample".into()));
    }
    let samples: Vec<f64> = (0..mc as u64)
        .into_par_iter()
        .map(|i| one_sample(mean, env, w_q, t, &mut rng.substream(i)))
        .collect::<Result<_>>()?;
    Ok(McEstimate::from_samples(&samples))
}

fn one_sample(mean: StepMean<'_>, env: &BlrEnv, w_q: &[f64], t: usize, rng: &mut RngStream) -> Result<f64> {
    let d = env.d();
    let sigma2 = env.sigma2();
    let mut state = OraclePosteriorState::prior(env);
    let mut xty = Vector::zeros(d);
    let mut x = vec![0.0; d];
    for _ in 0..t - 1 {
        env.sample_x_into(rng, &mut x);
        let y = env.sample_y(w_q, &x, rng);
        state.absorb(&x, y)?;
        for k in 0..d {
            xty[k] += y * x[k];
        }
    }
    env.sample_x_into(rng, &mut x);
    let pred = state.predictive(&x)?;
    let mu = match mean {
        StepMean::Gamma(m) => m.mean_from_stats(&xty, t - 1, &x),
        StepMean::Oracle => pred.mean,
    };
    let var = pred.var;
    let r = dot(w_q, &x) - mu;
    Ok(0.5 * ((sigma2 / var - 1.0) + (var / sigma2).ln() + r * r / var))
}

/// Large-`t` limit of [`excess_risk_step`]:
/// `(1/(2σ²)) w_qᵀ (I − HΓᵀ) H (I − HΓᵀ)ᵀ w_q`.
pub fn excess_risk_limit(model: &LinAttnModel, env: &BlrEnv, w_q: &[f64]) -> Result<f64> {
    let d = env.d();
    check_dim(d, model.d())?;
    check_dim(d, w_q.len())?;
    let h = env.h();
    let m = Matrix::identity(d, d) - h * model.gamma().transpose();
    let w = Vector::from_column_slice(w_q);
    let u = m.transpose() * &w;
    Ok((u.transpose() * h * &u)[(0, 0)] / (2.0 * env.sigma2()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env1() -> BlrEnv {
        BlrEnv::isotropic(1, 1.0, 1.0).unwrap()
    }

    #[test]
    fn limit_examples() {
        let env = env1();
        assert_eq!(excess_risk_limit(&LinAttnModel::zeros(1), &env, &[1.0]).unwrap(), 0.5);
        let half = LinAttnModel::new(Matrix::from_element(1, 1, 0.5)).unwrap();
        assert_eq!(excess_risk_limit(&half, &env, &[1.0]).unwrap(), 0.125);
        let h = crate::mathkit::random_spd(4, 20.0, &mut RngStream::new(1, 0));
        let env4 = BlrEnv::new(4, 1.0, 0.5, h.clone()).unwrap();
        let inv = LinAttnModel::inverse_of(&h).unwrap();
        assert!(excess_risk_limit(&inv, &env4, &[0.3, -1.0, 2.0, 0.5]).unwrap().abs() < 1e-24);
    }

    #[test]
    fn inverse_h_vanishes_at_large_t() {
        let est = excess_risk_step(
            &LinAttnModel::inverse_of(&Matrix::identity(1, 1)).unwrap(),
            &env1(),
            &[1.0],
            2000,
            400,
            &RngStream::new(2, 0),
        )
        .unwrap();
        assert!(est.mean <= 0.01, "{est:?}");
    }

    #[test]
    fn zero_gamma_matches_limit() {
        let est = excess_risk_step(&LinAttnModel::zeros(1), &env1(), &[1.0], 2000, 2000, &RngStream::new(3, 0)).unwrap();
        assert!(est.covers(0.5, 3.0), "{est:?}");
    }

    #[test]
    fn half_gamma_matches_limit() {
        let m = LinAttnModel::new(Matrix::from_element(1, 1, 0.5)).unwrap();
        let est = excess_risk_step(&m, &env1(), &[1.0], 5000, 1000, &RngStream::new(4, 0)).unwrap();
        assert!(est.covers(0.125, 3.0), "{est:?}");
    }

    /// Averaged over `w_q` drawn from the prior, the oracle mean has the
    /// smallest per-step risk (common random numbers for the comparison).
    #[test]
    fn oracle_mean_is_bayes_optimal() {
        let env = env1();
        let mut wrng = RngStream::new(5, 0);
        for t in [1usize, 2, 3, 6] {
            for g in [0.0, 0.25, 0.5, 1.0, 2.0] {
                let m = LinAttnModel::new(Matrix::from_element(1, 1, g)).unwrap();
                let (mut oracle, mut gamma) = (0.0, 0.0);
                for k in 0..50 {
                    let w = env.sample_w(&mut wrng);
                    let base = RngStream::new(50 + k, t as u64);
                    oracle += excess_risk_step_with(StepMean::Oracle, &env, w.as_slice(), t, 200, &base).unwrap().mean;
                    gamma += excess_risk_step(&m, &env, w.as_slice(), t, 200, &base).unwrap().mean;
                }
                assert!(oracle <= gamma + 1e-12, "t={t} g={g}: {oracle} > {gamma}");
            }
        }
    }

    #[test]
    fn argument_errors() {
        let env = env1();
        let m = LinAttnModel::zeros(1);
        let r = RngStream::new(0, 0);
        assert!(excess_risk_step(&m, &env, &[1.0], 0, 10, &r).is_err());
        assert!(excess_risk_step(&m, &env, &[1.0], 3, 0, &r).is_err());
        assert!(excess_risk_step(&m, &env, &[1.0, 2.0], 3, 10, &r).is_err());
        assert!(excess_risk_step(&LinAttnModel::zeros(2), &env, &[1.0], 3, 10, &r).is_err());
    }
}
