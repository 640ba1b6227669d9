//! Exchangeable sequence models as explicit Bayesian predictors.
//!
//! The crate is organized bottom-up:
//!
//! - [`mathkit`]: Gaussians, KL divergences, SPD solves and seeded streams.
//! - [`blr`]: the Bayesian linear regression environment and its conjugate
//!   oracle.
//! - [`linattn`]: the one-layer linear-attention predictor, its excess risk
//!   and the closed-form pre-training optimum.
//! - [`neural`]: a reverse-mode autodiff tape and the exchangeable
//!   transformer trained on top of it.
//! - [`inference`]: autoregressive bootstrap, credible intervals and
//!   posterior-gap scoring.
//! - [`harness`]: experiment configs, runners and reports.

pub mod blr;
pub mod error;
pub mod harness;
pub mod inference;
pub mod linattn;
pub mod mathkit;
pub mod neural;

pub use blr::{BlrEnv, BlrEnvParams, OraclePosteriorState, Trajectory};
pub use error::{Error, Result};
pub use linattn::LinAttnModel;
pub use mathkit::{Gaussian1, GaussianN, RngStream};
