//! Optimisation: schedule, AdamW, the two training stages, gradient audits
//! and checkpoints.

mod checkpoint;
mod config;
mod dataset;
mod gradcheck;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, RngState, MAGIC, VERSION};
pub use config::TrainConfig;
pub use dataset::{Dataset, Example};
pub use gradcheck::{batch_tie_margin, fresh_check_model, grad_check, random_batch, param_group, GradCheckConfig, GradCheckReport, GroupReport, GROUPS};
pub use optim::{adamw_update, clip_grad_norm, AdamW, AdamWConfig, Moments};
pub use schedule::cosine_lr;
pub use trainer::{
    set_trainable, stage1_trainable, stage2_trainable, train_stage1, train_stage2, EpochLog, LayerLoad, LoadTally,
    StepLog, TrainState,
};
