//! Inference by forward generation.
//!
//! Every predictor is driven through [`PredictiveModel`]: open a session,
//! feed it observed pairs, ask for the predictive at a new covariate. The
//! autoregressive bootstrap, horizon loss and CID estimator are written once
//! against that interface.

mod bootstrap;
mod evaluate;
mod io;

pub use bootstrap::{
    ar_bootstrap, bootstrap_replicate, credible_interval, posterior_gap, BootstrapConfig, BootstrapDraws, Statistic,
    OLS_RIDGE,
};
pub use evaluate::{cid_estimate, horizon_sq_loss, running_log_density, HorizonMode};
pub use io::{context_hash, read_draws, write_draws, DrawsSidecar, DRAWS_FORMAT_VERSION};

use crate::blr::{BlrEnv, OraclePosteriorState, Trajectory};
use crate::error::{check_dim, Error, Result};
use crate::linattn::LinAttnModel;
use crate::mathkit::{Gaussian1, RngStream, Vector};
use crate::neural::{ExtModel, ExtSession};

/// Incremental one-step predictor over a growing context.
pub trait PredictiveSession {
    /// Pairs observed so far.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Predictive for the next outcome at covariate `x`.
    fn predict(&self, x: &[f64]) -> Result<Gaussian1>;

    /// Appends `(x, y)` to the context.
    fn observe(&mut self, x: &[f64], y: f64) -> Result<()>;
}

/// A sequence model usable for forward generation.
pub trait PredictiveModel: Sync {
    fn id(&self) -> String;

    fn d(&self) -> usize;

    /// A session with an empty context.
    fn session(&self) -> Box<dyn PredictiveSession + '_>;

    /// A session that has absorbed every pair of `ctx`.
    fn session_with(&self, ctx: &Trajectory) -> Result<Box<dyn PredictiveSession + '_>> {
        check_dim(self.d(), ctx.dim())?;
        let mut s = self.session();
        for (x, y) in ctx.pairs() {
            s.observe(x, y)?;
        }
        Ok(s)
    }

    /// Predictive at `x` given the whole of `ctx`.
    fn predictive(&self, ctx: &Trajectory, x: &[f64]) -> Result<Gaussian1> {
        self.session_with(ctx)?.predict(x)
    }
}

/// Draws the next pair: `x ~ P_X` from `env`, then `y` from the session's
/// predictive. The pair is appended to the session and returned.
pub fn generate_next(session: &mut dyn PredictiveSession, env: &BlrEnv, rng: &mut RngStream) -> Result<(Vec<f64>, f64)> {
    let x = env.sample_x(rng);
    let y = session.predict(&x)?.sample(rng);
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("generated outcome at step {}", session.len() + 1)));
    }
    session.observe(&x, y)?;
    Ok((x, y))
}

/// The conjugate oracle of an environment.
#[derive(Clone, Debug)]
pub struct OracleModel {
    env: BlrEnv,
}

impl OracleModel {
    pub fn new(env: BlrEnv) -> Self {
        Self { env }
    }

    pub fn env(&self) -> &BlrEnv {
        &self.env
    }
}

impl PredictiveSession for OraclePosteriorState {
    fn len(&self) -> usize {
        self.t
    }

    fn predict(&self, x: &[f64]) -> Result<Gaussian1> {
        self.predictive(x)
    }

    fn observe(&mut self, x: &[f64], y: f64) -> Result<()> {
        self.absorb(x, y)
    }
}

impl PredictiveModel for OracleModel {
    fn id(&self) -> String {
        "oracle".into()
    }

    fn d(&self) -> usize {
        self.env.d()
    }

    fn session(&self) -> Box<dyn PredictiveSession + '_> {
        Box::new(self.env.prior_state())
    }
}

/// Linear attention with the oracle's predictive variance.
#[derive(Clone, Debug)]
pub struct LinAttnPredictor {
    model: LinAttnModel,
    env: BlrEnv,
    label: String,
}

impl LinAttnPredictor {
    pub fn new(model: LinAttnModel, env: BlrEnv, label: impl Into<String>) -> Result<Self> {
        check_dim(env.d(), model.d())?;
        Ok(Self { model, env, label: label.into() })
    }

    pub fn model(&self) -> &LinAttnModel {
        &self.model
    }
}

struct LinAttnSession<'a> {
    model: &'a LinAttnModel,
    xty: Vector,
    oracle: OraclePosteriorState,
}

impl PredictiveSession for LinAttnSession<'_> {
    fn len(&self) -> usize {
        self.oracle.t
    }

    fn predict(&self, x: &[f64]) -> Result<Gaussian1> {
        let var = self.oracle.predictive(x)?.var;
        Ok(Gaussian1 { mean: self.model.mean_from_stats(&self.xty, self.oracle.t, x), var })
    }

    fn observe(&mut self, x: &[f64], y: f64) -> Result<()> {
        self.oracle.absorb(x, y)?;
        for (s, xi) in self.xty.iter_mut().zip(x) {
            *s += xi * y;
        }
        Ok(())
    }
}

impl PredictiveModel for LinAttnPredictor {
    fn id(&self) -> String {
        self.label.clone()
    }

    fn d(&self) -> usize {
        self.model.d()
    }

    fn session(&self) -> Box<dyn PredictiveSession + '_> {
        Box::new(LinAttnSession { model: &self.model, xty: Vector::zeros(self.model.d()), oracle: self.env.prior_state() })
    }
}

impl PredictiveSession for ExtSession<'_> {
    fn len(&self) -> usize {
        ExtSession::len(self)
    }

    fn predict(&self, x: &[f64]) -> Result<Gaussian1> {
        ExtSession::predict(self, x)
    }

    fn observe(&mut self, x: &[f64], y: f64) -> Result<()> {
        ExtSession::observe(self, x, y)
    }
}

impl PredictiveModel for ExtModel {
    fn id(&self) -> String {
        let c = self.config();
        format!("ext-{:?}-{:?}", c.arch, c.pos_mode).to_lowercase()
    }

    fn d(&self) -> usize {
        self.config().d
    }

    fn session(&self) -> Box<dyn PredictiveSession + '_> {
        Box::new(ExtModel::session(self))
    }
}
