//! The toy conditional DDPM: schedule, denoiser network, simple loss,
//! ancestral sampler and checkpoint files.

mod checkpoint;
mod loss;
mod model;
mod sampler;
mod schedule;

use std::path::PathBuf;

pub use checkpoint::{
    bytes_f64, f64_bytes, load_checkpoint, read_checkpoint_manifest, save_checkpoint, ArtifactStamp,
    CheckpointManifest, ParamEntry, CHECKPOINT_FORMAT, MANIFEST_FILE,
};
pub use loss::{noise_errors, LossWeighting, prepare, simple_loss, simple_loss_graph, NoisedSample};
pub use model::{
    timestep_embedding, Context, DenoiserModel, Dense, LowRankAdapter, ModelConfig, ModelInput, OutputKind, ParamVars,
};
pub use sampler::{sample, sample_batch};
pub use schedule::{forward_noise, forward_noise_with, NoiseSchedule, ScheduleConfig};

use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("{what}: expected length {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("timestep {t} outside 0..{steps}")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite value while sampling at timestep {t}")]
    NonFinite { t: usize },
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("parameter {name}: expected shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("adapter rank {rank} must be in 1..={max}")]
    AdapterRank { rank: usize, max: usize },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("checkpoint format version {found}, expected {expected}")]
    FormatVersion { found: u32, expected: u32 },
    #[error("bad checkpoint manifest: {0}")]
    Manifest(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
