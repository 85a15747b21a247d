//! The three-stage model, its training procedure, ablation variants,
//! checkpoints, and a reference baseline.

pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod model;
pub mod train;

pub use baseline::{nearest_sensed, nearest_sensed_copy};
pub use checkpoint::{checkpoint_load, checkpoint_save, FORMAT_VERSION};
pub use config::{Ablation, ModelConfig, Stage};
pub use model::{mae_loss, Architecture, Batch, Calendar, ChainOutput, StpsModel, Step2Output, Step3Output};
pub use train::{
    evaluate_stage, predict_windows, train_all, train_stage, train_stage_fixed, train_step, EpochLog, StageLog,
};
