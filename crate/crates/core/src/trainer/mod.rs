//! Base pretraining, preference fine-tuning and the iterative loop.

mod finetune;
mod iterate;
mod optim;
mod pretrain;

pub use finetune::{finetune, finetune_unmerged, LoraConfig, Method, StepLog, TrainConfig, TrainLog};
pub use iterate::{
    data_stage, eval_stage, round_dir, run_iterations, stage_seed, train_stage, write_evaluation, write_trained,
    IterationConfig, IterationError, RoundArtifacts, CASES_FILE, DONE_FILE, REPORT_FILE, SFT_LOG, TRAIN_LOG,
};
pub use optim::{clip_grad_norm, global_norm, AdamW};
pub use pretrain::{cosine_lr, measure_base, pretrain_base, pretrain_example, BaseStats, PretrainConfig, PretrainReport};

pub use crate::diffusion::LossWeighting;
use crate::diffusion::DiffusionError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: String },
    #[error("non-finite {what} at step {step}; run aborted")]
    Aborted {
        step: usize,
        what: String,
        log: Box<TrainLog>,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("dataset view is empty")]
    EmptyDataset,
    #[error("pretraining failed: shape accuracy {:.3}", .0.stats.shape_accuracy)]
    PretrainFailed(Box<PretrainReport>),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
