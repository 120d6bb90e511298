//! Automated construction of disentangled preference data.
//!
//! Every attempt draws a conflicting `(source, target)` prompt pair and an
//! initial condition `s₀` from a source sample, then tries to build a
//! text pair under `(target, s₀)` and a condition pair under `(target, s₁)`
//! that share one anchor canvas.

mod build;
mod generator;
mod storage;
mod views;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use build::{
    build_anchor, build_dataset, build_record, build_records, generate_context_pool, Anchor, BuildStats, CallCounts,
    ContextEntry, Dataset, PreferenceRecord, Provenance,
};
pub use generator::{Generator, ModelGenerator, RenderGenerator};
pub use storage::{
    read_dataset, write_dataset, BlobRef, DatasetManifest, RecordEntry, DATASET_FORMAT, DATASET_MANIFEST,
};
pub use views::{bidedpo_view, mixed_dpo_view, naive_dpo_view, sft_view, MixedNegative};

use crate::diffusion::DiffusionError;
use crate::world::WorldError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("budget exhausted after {attempts} attempts: {realized} of {target} records")]
    BudgetExhausted {
        realized: usize,
        target: usize,
        attempts: usize,
    },
    #[error("{dropped} of {total} context-pool entries had no usable initial condition")]
    DegeneratePool { dropped: usize, total: usize },
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad dataset manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    World(#[from] WorldError),
}

impl PipelineError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            PipelineError::MissingFile(path.to_path_buf())
        } else {
            PipelineError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Target record count `N`.
    pub records: usize,
    /// Maximum generator draws per retry loop `K`.
    pub retries: usize,
    /// Resample the text negative until the judge rejects it.
    pub strict_negatives: bool,
    /// Extra source draws for a context entry whose initial condition is
    /// unusable.
    pub pool_resamples: usize,
    /// Attempt budget; `None` allows `4·N`.
    pub max_attempts: Option<usize>,
    /// Attempts processed per generator batch.
    pub wave: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            records: 2000,
            retries: 8,
            strict_negatives: false,
            pool_resamples: 5,
            max_attempts: None,
            wave: 128,
        }
    }
}

impl PipelineConfig {
    pub fn attempt_budget(&self) -> usize {
        self.max_attempts.unwrap_or(4 * self.records)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.records == 0 {
            return Err(PipelineError::InvalidConfig("records must be at least 1".into()));
        }
        if self.retries == 0 {
            return Err(PipelineError::InvalidConfig("retries must be at least 1".into()));
        }
        if self.wave == 0 {
            return Err(PipelineError::InvalidConfig("wave must be at least 1".into()));
        }
        if self.attempt_budget() == 0 {
            return Err(PipelineError::InvalidConfig("max_attempts must be at least 1".into()));
        }
        Ok(())
    }
}
