//! Gradient training of [`ExtModel`] on BLR sequences.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::ExtModel;
use super::objective::sequence_objective;
use super::tensor::Tensor;
use crate::blr::{BlrEnv, Trajectory};
use crate::error::{check_dim, Error, Result};
use crate::linattn::McEstimate;
use crate::mathkit::RngStream;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub nll: f64,
    pub cid: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ExtModel,
    pub curve: Vec<LossRecord>,
}

/// Cosine-annealed learning rate at `step` of `steps`.
pub fn cosine_lr(base: f64, step: usize, steps: usize) -> f64 {
    if steps == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos())
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = BETA1 * m.data[k] + (1.0 - BETA1) * gk;
                v.data[k] = BETA2 * v.data[k] + (1.0 - BETA2) * gk * gk;
                let mh = m.data[k] / c1;
                let vh = v.data[k] / c2;
                p.data[k] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// The training batch for `step`: fresh trajectories, each with its own
/// uniform pair permutation when `augment` is set.
fn sample_batch(env: &BlrEnv, cfg: &TrainConfig, rng: &mut RngStream) -> Result<Vec<Trajectory>> {
    (0..cfg.batch)
        .map(|_| {
            let t = env.sample_trajectory(cfg.seq_len, rng)?;
            Ok(if cfg.augment {
                let perm = rng.permutation(t.len());
                t.permuted(&perm)
            } else {
                t
            })
        })
        .collect()
}

/// Batch-mean objective and gradients. Sequences run in parallel and are
/// reduced in batch order.
fn batch_objective(
    model: &ExtModel,
    batch: &[Trajectory],
    env: &BlrEnv,
    lambda_cid: f64,
    m: usize,
    rng: &RngStream,
) -> Result<(f64, f64, Vec<Tensor>)> {
    let parts: Vec<_> = batch
        .par_iter()
        .enumerate()
        .map(|(b, traj)| sequence_objective(model, traj, env, lambda_cid, m, &mut rng.substream(b as u64)))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
    let (mut nll, mut cid) = (0.0, 0.0);
    for part in &parts {
        nll += part.nll;
        cid += part.cid;
        for (g, pg) in grads.iter_mut().zip(&part.grads) {
            g.add_assign(pg);
        }
    }
    for g in &mut grads {
        g.data.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((nll * scale, cid * scale, grads))
}

/// Trains a copy of `model` on fresh batches from `env`.
///
/// Aborts with [`Error::Diverged`] on a non-finite loss or when the loss
/// stays above ten times its initial value for 100 consecutive steps.
pub fn train(model: &ExtModel, env: &BlrEnv, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dim(model.config().d, env.d())?;
    model.check_pairs(cfg.seq_len)?;
    let mut model = model.clone();
    let mut adam = Adam::new(model.params());
    let base = RngStream::new(cfg.seed, 0x7a11);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut initial = None;
    let mut above = 0;
    for step in 0..cfg.steps {
        let mut rng = base.substream(step as u64);
        let batch = sample_batch(env, cfg, &mut rng)?;
        let (nll, cid, grads) = batch_objective(&model, &batch, env, cfg.lambda_cid, cfg.mc_samples, &rng)?;
        let total = nll + cfg.lambda_cid * cid;
        if !total.is_finite() {
            return Err(Error::Diverged { step, loss: total });
        }
        let init = *initial.get_or_insert(total);
        if total > DIVERGENCE_FACTOR * f64::abs(init) {
            above += 1;
            if above >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged { step, loss: total });
            }
        } else {
            above = 0;
        }
        curve.push(LossRecord { step, nll, cid, total });
        adam.step(model.params_mut(), &grads, cosine_lr(cfg.lr, step, cfg.steps));
    }
    Ok(TrainOutcome { model, curve })
}

/// Mean per-trajectory NLL of `model` on `trajs`, with its standard error.
pub fn evaluate_nll(model: &ExtModel, trajs: &[Trajectory]) -> Result<McEstimate> {
    let values = trajs
        .par_iter()
        .map(|t| {
            let preds = model.forward(std::slice::from_ref(t))?;
            super::objective::nll_loss(&preds, std::slice::from_ref(t))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(McEstimate::from_samples(&values))
}

/// Largest relative error between tape gradients of the batch-mean NLL and
/// central finite differences, over up to `n_params` parameters sampled
/// without replacement from those whose name passes `filter`.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check_filtered(
    model: &ExtModel,
    batch: &[Trajectory],
    eps: f64,
    n_params: usize,
    filter: impl Fn(&str) -> bool,
    rng: &mut RngStream,
) -> Result<f64> {
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Domain(format!("eps must lie in [1e-6, 1e-4], got {eps}")));
    }
    let dummy_env = BlrEnv::isotropic(model.config().d, 1.0, 1.0)?;
    let (_, _, grads) = batch_objective(model, batch, &dummy_env, 0.0, 1, &RngStream::new(0, 0))?;
    let mut candidates = Vec::new();
    let mut off = 0;
    for (name, p) in model.param_names().iter().zip(model.params()) {
        if filter(name) {
            candidates.extend(off..off + p.len());
        }
        off += p.len();
    }
    rng.shuffle(&mut candidates);
    candidates.truncate(n_params);
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data.iter().copied()).collect();
    let base = model.flat();
    let loss_at = |flat: &[f64]| -> Result<f64> {
        let m = ExtModel::from_flat(model.config().clone(), flat)?;
        super::objective::nll_loss(&m.forward(batch)?, batch)
    };
    let errors = candidates
        .par_iter()
        .map(|&k| {
            let mut p = base.clone();
            p[k] = base[k] + eps;
            let fp = loss_at(&p)?;
            p[k] = base[k] - eps;
            let fm = loss_at(&p)?;
            let num = (fp - fm) / (2.0 * eps);
            let a = analytic[k];
            Ok((a - num).abs() / a.abs().max(num.abs()).max(1e-6))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errors.into_iter().fold(0.0, f64::max))
}

/// [`grad_check_filtered`] over all parameters with 200 samples.
pub fn grad_check(model: &ExtModel, batch: &[Trajectory], eps: f64, rng: &mut RngStream) -> Result<f64> {
    grad_check_filtered(model, batch, eps, 200, |_| true, rng)
}
