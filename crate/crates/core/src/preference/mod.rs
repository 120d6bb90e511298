//! Preference-optimization objectives: per-sample rewards, the coupled DPO
//! loss, adaptive loss balancing and the decoupled two-pair objective.

mod alb;
mod diagnostic;
mod loss;
mod reward;

pub use alb::{alb_weights, AlbMode, AlbState};
pub use diagnostic::{
    build_diagnostic_case, entanglement_diagnostic, DiagnosticCase, EntanglementReport, DIAGNOSTIC_COND_MARGIN,
    DIAGNOSTIC_TUNE_STEPS,
};
pub use loss::{
    bidedpo_loss, bidedpo_loss_graph, coupled_dpo_loss, coupled_dpo_loss_graph, dpo_loss_from_diff,
    joint_coupled_loss_graph, LossBreakdown,
};
pub use reward::{
    reward_difference, reward_differences_graph, rewards_graph, sample_reward, PairKind, PairNoise, PreferencePair,
    ScoredPair,
};

use crate::diffusion::DiffusionError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum PreferenceError {
    #[error("non-finite value in {term}")]
    NonFinite { term: &'static str },
    #[error("empty batch")]
    EmptyBatch,
    #[error("text and condition batches differ in length ({text} vs {cond})")]
    BatchMismatch { text: usize, cond: usize },
    #[error("expected a {expected:?} pair, got {got:?}")]
    WrongKind { expected: PairKind, got: PairKind },
    #[error("invalid fixed weight {0}; must lie in [0, 1]")]
    InvalidWeight(f64),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
