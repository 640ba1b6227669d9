use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_next, PredictiveModel};
use crate::blr::{BlrEnv, Trajectory};
use crate::error::{check_dim, Error, Result};
use crate::mathkit::{fit_gaussian, kl_gaussian_n, quantile_sorted, spd_solve, GaussianN, Matrix, RngStream, Vector};

/// Ridge added to the OLS normal equations so collinear generated
/// covariates do not abort a replicate.
pub const OLS_RIDGE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    /// Mean of the outcomes.
    EmpiricalMean,
    /// Least-squares coefficient of `y` on `x`.
    Ols,
}

impl Statistic {
    pub fn dim(self, d: usize) -> usize {
        match self {
            Statistic::EmpiricalMean => 1,
            Statistic::Ols => d,
        }
    }

    pub fn min_len(self, d: usize) -> usize {
        match self {
            Statistic::EmpiricalMean => 1,
            Statistic::Ols => d + 1,
        }
    }

    pub fn compute(self, traj: &Trajectory) -> Result<Vec<f64>> {
        let (d, n) = (traj.dim(), traj.len());
        let need = self.min_len(d);
        if n < need {
            return Err(Error::TooFewSamples { needed: need, got: n });
        }
        match self {
            Statistic::EmpiricalMean => Ok(vec![traj.ys().iter().sum::<f64>() / n as f64]),
            Statistic::Ols => {
                let mut xtx = Matrix::identity(d, d) * OLS_RIDGE;
                for (x, _) in traj.pairs() {
                    for i in 0..d {
                        for j in 0..d {
                            xtx[(i, j)] += x[i] * x[j];
                        }
                    }
                }
                Ok(spd_solve(&xtx, &traj.xty())?.as_slice().to_vec())
            }
        }
    }
}

/// Settings of one bootstrap run, echoed alongside its draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub s: usize,
    pub t: usize,
    pub b: usize,
    pub stat: Statistic,
    pub seed: u64,
    pub stream: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapDraws {
    pub values: Vec<Vec<f64>>,
    pub config: BootstrapConfig,
}

/// One replicate: extend `context` to length `t` by sampling from `model`,
/// then evaluate `stat` on the full trajectory (context included).
pub fn bootstrap_replicate(
    model: &dyn PredictiveModel,
    env: &BlrEnv,
    context: &Trajectory,
    t: usize,
    stat: Statistic,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let mut session = model.session_with(context)?;
    let mut traj = Trajectory::with_capacity(context.dim(), t);
    for (x, y) in context.pairs() {
        traj.push(x, y)?;
    }
    for _ in context.len()..t {
        let (x, y) = generate_next(session.as_mut(), env, rng)?;
        traj.push(&x, y)?;
    }
    stat.compute(&traj)
}

/// Autoregressive bootstrap: `b` replicates of [`bootstrap_replicate`],
/// replicate `i` drawing from `rng.substream(i)`.
pub fn ar_bootstrap(
    model: &dyn PredictiveModel,
    env: &BlrEnv,
    context: &Trajectory,
    t: usize,
    b: usize,
    stat: Statistic,
    rng: &RngStream,
) -> Result<BootstrapDraws> {
    check_dim(model.d(), context.dim())?;
    check_dim(env.d(), context.dim())?;
    let s = context.len();
    if t <= s {
        return Err(Error::Domain(format!("horizon {t} must exceed the context length {s}")));
    }
    if b == 0 {
        return Err(Error::Domain("need at least one replicate".into()));
    }
    let need = stat.min_len(context.dim());
    if t < need {
        return Err(Error::TooFewSamples { needed: need, got: t });
    }
    let values = (0..b as u64)
        .into_par_iter()
        .map(|i| bootstrap_replicate(model, env, context, t, stat, &mut rng.substream(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(BootstrapDraws { values, config: BootstrapConfig { s, t, b, stat, seed: rng.seed(), stream: rng.stream_id() } })
}

/// Equal-tailed interval per coordinate holding `alpha` of the draws.
pub fn credible_interval(draws: &BootstrapDraws, alpha: f64) -> Result<Vec<(f64, f64)>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let n = draws.values.len();
    if n < 20 {
        return Err(Error::TooFewSamples { needed: 20, got: n });
    }
    let k = draws.values[0].len();
    let lo = (1.0 - alpha) / 2.0;
    Ok((0..k)
        .map(|c| {
            let mut col: Vec<f64> = draws.values.iter().map(|v| v[c]).collect();
            col.sort_by(f64::total_cmp);
            (quantile_sorted(&col, lo), quantile_sorted(&col, 1.0 - lo))
        })
        .collect())
}

/// `KL(fitted ‖ oracle)` where `fitted` is the moment-matched Gaussian of
/// OLS draws.
pub fn posterior_gap(draws: &BootstrapDraws, oracle: &GaussianN) -> Result<f64> {
    if draws.config.stat != Statistic::Ols {
        return Err(Error::Contract("posterior gap needs OLS draws".into()));
    }
    if let Some(first) = draws.values.first() {
        check_dim(oracle.dim(), first.len())?;
    }
    let samples: Vec<Vector> = draws.values.iter().map(|v| Vector::from_column_slice(v)).collect();
    kl_gaussian_n(&fit_gaussian(&samples)?, oracle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blr::OraclePosteriorState;
    use crate::inference::testing::ConstantModel;
    use crate::inference::OracleModel;

    fn env1() -> BlrEnv {
        BlrEnv::isotropic(1, 1.0, 1.0).unwrap()
    }

    fn draws_of(values: Vec<Vec<f64>>, stat: Statistic) -> BootstrapDraws {
        let b = values.len();
        BootstrapDraws { values, config: BootstrapConfig { s: 0, t: 1, b, stat, seed: 0, stream: 0 } }
    }

    #[test]
    fn statistics_on_a_hand_trajectory() {
        let t = Trajectory::from_parts(1, vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.5]).unwrap();
        assert_eq!(Statistic::EmpiricalMean.compute(&t).unwrap(), vec![12.5 / 3.0]);
        let beta = Statistic::Ols.compute(&t).unwrap()[0];
        assert!((beta - 29.5 / 14.0).abs() < 1e-9);
        let short = Trajectory::from_parts(2, vec![1.0, 0.0], vec![1.0]).unwrap();
        assert!(matches!(Statistic::Ols.compute(&short), Err(Error::TooFewSamples { needed: 3, got: 1 })));
        // Collinear covariates survive through the ridge.
        let flat = Trajectory::from_parts(2, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(Statistic::Ols.compute(&flat).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn degenerate_model_gives_zero_means() {
        let m = ConstantModel { d: 1, mean: 0.0, var: 1e-18 };
        let ctx = Trajectory::new(1);
        let d = ar_bootstrap(&m, &env1(), &ctx, 50, 40, Statistic::EmpiricalMean, &RngStream::new(1, 0)).unwrap();
        assert_eq!(d.values.len(), 40);
        assert!(d.values.iter().all(|v| v[0].abs() <= 1e-6));
    }

    #[test]
    fn argument_errors() {
        let m = OracleModel::new(env1());
        let ctx = env1().sample_trajectory(5, &mut RngStream::new(0, 0)).unwrap();
        let rng = RngStream::new(0, 0);
        assert!(ar_bootstrap(&m, &env1(), &ctx, 5, 10, Statistic::Ols, &rng).is_err());
        assert!(ar_bootstrap(&m, &env1(), &ctx, 8, 0, Statistic::Ols, &rng).is_err());
        let env2 = BlrEnv::isotropic(2, 1.0, 1.0).unwrap();
        assert!(ar_bootstrap(&OracleModel::new(env2.clone()), &env2, &ctx, 8, 5, Statistic::Ols, &rng).is_err());
    }

    #[test]
    fn stream_order_does_not_matter() {
        let env = env1();
        let m = OracleModel::new(env.clone());
        let ctx = env.sample_trajectory(3, &mut RngStream::new(4, 0)).unwrap();
        let rng = RngStream::new(9, 1);
        let b = 30;
        let fwd = ar_bootstrap(&m, &env, &ctx, 20, b, Statistic::Ols, &rng).unwrap();
        let again = ar_bootstrap(&m, &env, &ctx, 20, b, Statistic::Ols, &rng).unwrap();
        assert_eq!(fwd, again);
        let mut rev: Vec<Vec<f64>> = (0..b as u64)
            .map(|i| bootstrap_replicate(&m, &env, &ctx, 20, Statistic::Ols, &mut rng.substream(b as u64 - 1 - i)).unwrap())
            .collect();
        let mut a = fwd.values.clone();
        a.sort_by(|x, y| x[0].total_cmp(&y[0]));
        rev.sort_by(|x, y| x[0].total_cmp(&y[0]));
        assert_eq!(a, rev);
    }

    #[test]
    fn interval_examples() {
        let c = draws_of(vec![vec![2.5, -1.0]; 25], Statistic::Ols);
        assert_eq!(credible_interval(&c, 0.9).unwrap(), vec![(2.5, 2.5), (-1.0, -1.0)]);
        let seq = draws_of((1..=100).map(|v| vec![v as f64]).collect(), Statistic::EmpiricalMean);
        let (lo, hi) = credible_interval(&seq, 0.9).unwrap()[0];
        assert!((lo - 5.95).abs() < 1e-12 && (hi - 95.05).abs() < 1e-12);
        assert!(credible_interval(&draws_of(vec![vec![0.0]; 19], Statistic::Ols), 0.9).is_err());
        assert!(credible_interval(&seq, 1.0).is_err());
    }

    #[test]
    fn gap_of_direct_posterior_draws_is_small() {
        let env = BlrEnv::isotropic(2, 1.0, 0.5).unwrap();
        let ctx = env.sample_trajectory(6, &mut RngStream::new(2, 0)).unwrap();
        let post = OraclePosteriorState::from_pairs(&env, ctx.pairs()).unwrap().posterior().unwrap();
        let sampler = post.sampler().unwrap();
        let mut rng = RngStream::new(3, 0);
        let values = (0..10_000).map(|_| sampler.sample(&mut rng).as_slice().to_vec()).collect();
        let gap = posterior_gap(&draws_of(values, Statistic::Ols), &post).unwrap();
        assert!(gap <= 0.01, "{gap}");
        let means = draws_of(vec![vec![0.0]; 30], Statistic::EmpiricalMean);
        assert!(matches!(posterior_gap(&means, &post), Err(Error::Contract(_))));
    }

    #[test]
    fn oracle_bootstrap_matches_posterior() {
        let env = env1();
        let m = OracleModel::new(env.clone());
        let ctx = env.sample_trajectory(8, &mut RngStream::new(21, 0)).unwrap();
        let post = OraclePosteriorState::from_pairs(&env, ctx.pairs()).unwrap().posterior().unwrap();
        let draws = ar_bootstrap(&m, &env, &ctx, 200, 500, Statistic::Ols, &RngStream::new(22, 0)).unwrap();
        let gap = posterior_gap(&draws, &post).unwrap();
        assert!(gap <= 0.05, "{gap}");
    }
}
