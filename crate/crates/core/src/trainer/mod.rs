//! Optimization, the two training stages, checkpoints and gradient checks.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod train;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, RngState, TrainState};
pub use config::TrainConfig;
pub use gradcheck::{gradient_check_suite, param_family};
pub use graph::{loss_and_grad, Evaluation, TrainBatch};
pub use optim::{adamw_update, clip_global_norm, AdamState, AdamWConfig, LrSchedule};
pub use train::{
    extend_context, run_posttrain, run_pretrain, train_step, validation_losses, StageRun, StepReport, Trainer,
};
