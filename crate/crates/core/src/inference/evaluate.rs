use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PredictiveModel;
use crate::blr::{BlrEnv, Trajectory};
use crate::error::{check_dim, Error, Result};
use crate::linattn::McEstimate;
use crate::mathkit::{kl_gaussian1_unchecked, mean_se, RngStream};
use crate::neural::{cid_draws, CidEstimate, VAR_FLOOR};

/// What the model conditions on after predicting a position past `s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonMode {
    /// Condition on the model's own draw.
    FreeRunning,
    /// Condition on the observed outcome.
    TeacherForced,
}

fn horizon_one(
    model: &dyn PredictiveModel,
    env: &BlrEnv,
    s: usize,
    t_len: usize,
    mode: HorizonMode,
    rng: &mut RngStream,
) -> Result<f64> {
    let truth = env.sample_trajectory(t_len, rng)?;
    let mut session = model.session();
    let mut total = 0.0;
    for (i, (x, y)) in truth.pairs().enumerate() {
        if i < s {
            session.observe(x, y)?;
            continue;
        }
        let y_hat = session.predict(x)?.sample(rng);
        if !y_hat.is_finite() {
            return Err(Error::NonFinite(format!("forward sample at step {}", i + 1)));
        }
        total += (y_hat - y) * (y_hat - y);
        match mode {
            HorizonMode::FreeRunning => session.observe(x, y_hat)?,
            HorizonMode::TeacherForced => session.observe(x, y)?,
        }
    }
    Ok(total / t_len as f64)
}

/// `T`-horizon squared loss `(1/T) Σ_{t>s} (Ŷ_t − Y_t)²` over `n_traj`
/// trajectories from `env`; the first `s` positions contribute zero.
/// Trajectory `j` draws from `rng.substream(j)`.
pub fn horizon_sq_loss(
    model: &dyn PredictiveModel,
    env: &BlrEnv,
    s: usize,
    t_len: usize,
    n_traj: usize,
    mode: HorizonMode,
    rng: &RngStream,
) -> Result<McEstimate> {
    check_dim(env.d(), model.d())?;
    if t_len <= s {
        return Err(Error::Domain(format!("horizon {t_len} must exceed s = {s}")));
    }
    if n_traj == 0 {
        return Err(Error::Domain("need at least one trajectory".into()));
    }
    let losses = (0..n_traj as u64)
        .into_par_iter()
        .map(|j| horizon_one(model, env, s, t_len, mode, &mut rng.substream(j)))
        .collect::<Result<Vec<_>>>()?;
    Ok(McEstimate::from_samples(&losses))
}

/// Running average `(1/t) Σ_{i≤t} log p̂(y_i | past)` for `t = 1 … T`.
pub fn running_log_density(model: &dyn PredictiveModel, traj: &Trajectory) -> Result<Vec<f64>> {
    check_dim(model.d(), traj.dim())?;
    let mut session = model.session();
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(traj.len());
    for (i, (x, y)) in traj.pairs().enumerate() {
        acc += session.predict(x)?.log_pdf(y);
        session.observe(x, y)?;
        out.push(acc / (i + 1) as f64);
    }
    Ok(out)
}

/// Monte Carlo CID estimate for any predictor, using the same draws as the
/// training regularizer: trajectory `b` draws from `rng.substream(b)`.
pub fn cid_estimate(
    model: &dyn PredictiveModel,
    env: &BlrEnv,
    batch: &[Trajectory],
    m: usize,
    rng: &RngStream,
) -> Result<CidEstimate> {
    check_dim(env.d(), model.d())?;
    if m == 0 {
        return Err(Error::Domain("need at least one Monte Carlo sample".into()));
    }
    let mut terms = Vec::new();
    let mut floors = 0;
    for (b, traj) in batch.iter().enumerate() {
        check_dim(model.d(), traj.dim())?;
        if traj.len() < 2 {
            return Err(Error::Domain("the CID estimate needs at least two pairs".into()));
        }
        let draws = cid_draws(env, traj.len(), m, &mut rng.substream(b as u64));
        for t in 0..traj.len() - 1 {
            let prefix = traj.prefix(t);
            let one = model.session_with(&prefix)?.predict(traj.x(t))?;
            let (mut s1, mut s2) = (0.0, 0.0);
            for k in 0..m {
                let mut session = model.session_with(&prefix)?;
                let xp = &draws.xs[t * m + k];
                let p = session.predict(xp)?;
                session.observe(xp, p.mean + p.var.sqrt() * draws.eps[t * m + k])?;
                let q = session.predict(traj.x(t))?;
                s1 += q.mean;
                s2 += q.mean * q.mean + q.var;
            }
            let mean2 = s1 / m as f64;
            let raw = s2 / m as f64 - mean2 * mean2;
            if !(raw >= VAR_FLOOR) {
                floors += 1;
            }
            terms.push(kl_gaussian1_unchecked(one.mean, one.var, mean2, raw.max(VAR_FLOOR)));
        }
    }
    if terms.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let (value, se) = mean_se(&terms);
    Ok(CidEstimate { value, se, floors, terms: terms.len() })
}
