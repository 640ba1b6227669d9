//! Reverse-mode autodiff and the exchangeable transformer.

mod checkpoint;
mod config;
mod model;
mod objective;
pub mod tape;
pub mod tensor;
mod train;

pub use config::{Arch, ExtConfig, PosMode, TrainConfig};
pub use model::{build_mask, ExtModel, ExtSession};
pub use objective::{cid_regularizer, nll_loss, CidEstimate, VAR_FLOOR};
pub(crate) use objective::cid_draws;
pub use train::{cosine_lr, evaluate_nll, grad_check, grad_check_filtered, train, LossRecord, TrainOutcome};
pub use checkpoint::{
    load_checkpoint, params_path, read_loss_curve, save_checkpoint, write_loss_curve, CheckpointManifest, ParamEntry,
    CHECKPOINT_FORMAT_VERSION,
};
