//! Training objectives on the tape: Gaussian NLL and the CID regularizer.

use std::rc::Rc;

use super::model::{ExtModel, YOverride};
use super::tape::{Graph, Var};
use super::tensor::Tensor;
use crate::blr::{BlrEnv, Trajectory};
use crate::error::{check_dim, Error, Result};
use crate::mathkit::{mean_se, Gaussian1, RngStream};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Floor for Monte Carlo two-step variances.
pub const VAR_FLOOR: f64 = 1e-8;

/// Mean Gaussian negative log-likelihood of `batch` under per-pair
/// predictions.
pub fn nll_loss(predictions: &[Vec<Gaussian1>], batch: &[Trajectory]) -> Result<f64> {
    check_dim(batch.len(), predictions.len())?;
    let mut total = 0.0;
    let mut n = 0usize;
    for (preds, traj) in predictions.iter().zip(batch) {
        check_dim(traj.len(), preds.len())?;
        for (p, &y) in preds.iter().zip(traj.ys()) {
            p.validate()?;
            total += 0.5 * (LN_2PI + p.var.ln() + (y - p.mean).powi(2) / p.var);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    Ok(total / n as f64)
}

/// Tape NLL of `mu`/`logvar` against constant outcomes `y`.
pub(crate) fn nll_graph(g: &mut Graph, mu: Var, logvar: Var, y: &[f64]) -> Var {
    let yv = g.leaf(Tensor::from_vec(y.len(), 1, y.to_vec()));
    let diff = g.sub(mu, yv);
    let sq = g.square(diff);
    let inv = g.scale(logvar, -1.0);
    let inv = g.exp(inv);
    let scaled = g.mul(sq, inv);
    let s = g.add(logvar, scaled);
    let s = g.offset(s, LN_2PI);
    let s = g.scale(s, 0.5);
    g.mean(s)
}

/// Elementwise `KL(N(m1, e^{l1}) ‖ N(m2, v2))` on the tape.
fn kl_graph(g: &mut Graph, m1: Var, l1: Var, m2: Var, v2: Var) -> Var {
    let v1 = g.exp(l1);
    let lv2 = g.log(v2);
    let log_ratio = g.sub(lv2, l1);
    let diff = g.sub(m1, m2);
    let sq = g.square(diff);
    let num = g.add(v1, sq);
    let frac = g.div(num, v2);
    let s = g.add(log_ratio, frac);
    let s = g.offset(s, -1.0);
    g.scale(s, 0.5)
}

/// A CID regularizer evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CidEstimate {
    /// Mean KL between one-step and two-step predictives.
    pub value: f64,
    /// Standard error over the individual KL terms.
    pub se: f64,
    /// Terms whose two-step variance hit [`VAR_FLOOR`].
    pub floors: usize,
    pub terms: usize,
}

/// Draws for one trajectory: for every context size `t` and sample `m`,
/// a covariate `x' ~ P_X` and a standard normal for the reparameterized
/// outcome, in `(t, m)` order.
pub(crate) struct CidDraws {
    pub xs: Vec<Vec<f64>>,
    pub eps: Vec<f64>,
}

pub(crate) fn cid_draws(env: &BlrEnv, t_len: usize, m: usize, rng: &mut RngStream) -> CidDraws {
    let n = t_len.saturating_sub(1) * m;
    let mut xs = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(n);
    for _ in 0..n {
        xs.push(env.sample_x(rng));
        eps.push(rng.normal());
    }
    CidDraws { xs, eps }
}

/// Builds the CID terms for one trajectory on the tape.
///
/// `one_mu`/`one_lv` are the trajectory's own per-pair predictions. For each
/// `t = 0 … T−2` and sample `m`, a first pass predicts at `x'` after the
/// first `t` pairs; `ζ = μ + σ·ε` is inserted as pair `t+1` and a second pass
/// predicts at `x_{t+1}`. Returns the `(T−1) × 1` KL terms and the number of
/// floored variances.
pub(crate) fn cid_graph(
    model: &ExtModel,
    g: &mut Graph,
    pv: &[Var],
    traj: &Trajectory,
    one_mu: Var,
    one_lv: Var,
    m: usize,
    draws: &CidDraws,
) -> Result<(Var, usize)> {
    let t_len = traj.len();
    if t_len < 2 {
        return Err(Error::Domain("the CID regularizer needs at least two pairs".into()));
    }
    if m == 0 {
        return Err(Error::Domain("need at least one Monte Carlo sample".into()));
    }
    let n_terms = t_len - 1;
    let mut first = Vec::with_capacity(n_terms * m);
    let mut second = Vec::with_capacity(n_terms * m);
    for t in 0..n_terms {
        for k in 0..m {
            let xp = &draws.xs[t * m + k];
            let mut a = traj.prefix(t);
            a.w = None;
            a.push(xp, 0.0)?;
            let mut b = a.clone();
            b.push(traj.x(t), 0.0)?;
            first.push(a);
            second.push(b);
        }
    }
    let refs: Vec<&Trajectory> = first.iter().collect();
    let p1 = model.forward_graph(g, pv, &refs, None)?;
    // Last pair of each first-pass sequence.
    let mut ends = Vec::with_capacity(first.len());
    let mut off = 0;
    for s in &first {
        off += s.len();
        ends.push(off - 1);
    }
    let ends: Rc<[usize]> = ends.into();
    let mu1 = g.select_rows(p1.mu, ends.clone());
    let lv1 = g.select_rows(p1.logvar, ends);
    let half = g.scale(lv1, 0.5);
    let sd = g.exp(half);
    let eps = g.leaf(Tensor::from_vec(draws.eps.len(), 1, draws.eps.clone()));
    let noise = g.mul(sd, eps);
    let zeta = g.add(mu1, noise);

    let mut zeta_pairs = Vec::with_capacity(second.len());
    let mut last = Vec::with_capacity(second.len());
    let mut off = 0;
    for s in &second {
        zeta_pairs.push(off + s.len() - 2);
        last.push(off + s.len() - 1);
        off += s.len();
    }
    let refs: Vec<&Trajectory> = second.iter().collect();
    let ov = YOverride { values: zeta, pairs: zeta_pairs };
    let p2 = model.forward_graph(g, pv, &refs, Some(&ov))?;
    let last: Rc<[usize]> = last.into();
    let mu2 = g.select_rows(p2.mu, last.clone());
    let lv2 = g.select_rows(p2.logvar, last);

    let mean2 = g.group_mean(mu2, m);
    let v2 = g.exp(lv2);
    let mu2sq = g.square(mu2);
    let second_moment = g.add(mu2sq, v2);
    let second_moment = g.group_mean(second_moment, m);
    let mean2sq = g.square(mean2);
    let raw_var = g.sub(second_moment, mean2sq);
    let floors = g.value(raw_var).data.iter().filter(|&&v| !(v >= VAR_FLOOR)).count();
    let var2 = g.clamp(raw_var, VAR_FLOOR, f64::INFINITY);

    let idx: Rc<[usize]> = (0..n_terms).collect();
    let m1 = g.select_rows(one_mu, idx.clone());
    let l1 = g.select_rows(one_lv, idx);
    Ok((kl_graph(g, m1, l1, mean2, var2), floors))
}

/// Monte Carlo CID regularizer of `model` on `batch`: the mean over
/// trajectories and context sizes of `KL(one-step ‖ two-step)`.
/// Trajectory `b` draws from `rng.substream(b)`.
pub fn cid_regularizer(model: &ExtModel, batch: &[Trajectory], env: &BlrEnv, m: usize, rng: &RngStream) -> Result<CidEstimate> {
    let mut terms = Vec::new();
    let mut floors = 0;
    for (b, traj) in batch.iter().enumerate() {
        let mut g = Graph::new();
        let pv = model.leaves(&mut g);
        let fv = model.forward_graph(&mut g, &pv, &[traj], None)?;
        let draws = cid_draws(env, traj.len(), m, &mut rng.substream(b as u64));
        let (kl, f) = cid_graph(model, &mut g, &pv, traj, fv.mu, fv.logvar, m, &draws)?;
        terms.extend_from_slice(&g.value(kl).data);
        floors += f;
    }
    if terms.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let (value, se) = mean_se(&terms);
    Ok(CidEstimate { value, se, floors, terms: terms.len() })
}

/// Loss and parameter gradients for one trajectory.
pub(crate) struct SequenceGrad {
    pub nll: f64,
    pub cid: f64,
    pub grads: Vec<Tensor>,
}

/// `nll + λ·cid` for a single trajectory with gradients for every
/// parameter. With `lambda_cid == 0` the regularizer is skipped.
pub(crate) fn sequence_objective(
    model: &ExtModel,
    traj: &Trajectory,
    env: &BlrEnv,
    lambda_cid: f64,
    m: usize,
    rng: &mut RngStream,
) -> Result<SequenceGrad> {
    let mut g = Graph::new();
    let pv = model.leaves(&mut g);
    let fv = model.forward_graph(&mut g, &pv, &[traj], None)?;
    let nll = nll_graph(&mut g, fv.mu, fv.logvar, traj.ys());
    let (total, cid) = if lambda_cid > 0.0 && traj.len() >= 2 {
        let draws = cid_draws(env, traj.len(), m, rng);
        let (kl, _) = cid_graph(model, &mut g, &pv, traj, fv.mu, fv.logvar, m, &draws)?;
        let cid = g.mean(kl);
        let weighted = g.scale(cid, lambda_cid);
        (g.add(nll, weighted), g.scalar(cid))
    } else {
        (nll, 0.0)
    };
    let grads = g.backward(total);
    let grads = pv
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
        .collect();
    Ok(SequenceGrad { nll: g.scalar(nll), cid, grads })
}
