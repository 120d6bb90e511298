//! Procedural stand-in for prompts, condition extractors and VLM judging.
//!
//! A scene is one filled shape on a 16×16 grayscale canvas. Prompts name the
//! shape class and optionally an intensity class and a stripe orientation;
//! conditions are binary masks extracted from canvases. Every oracle in this
//! module is a pure function of its inputs.

mod canvas;
mod conflict;
mod extract;
mod holdout;
mod judge;
mod prompt;
mod render;

pub use canvas::{Canvas, ConditionMap, CELLS, SIDE};
pub use conflict::{classify_conflict, make_conflict_case, mask_extent, scale_class, BiasTable, ConflictKind};
pub use extract::{extract_condition, smooth};
pub use holdout::{combination_key, is_held_out, HOLDOUT_BUCKETS};
pub use judge::{judge_text, orientation_statistic, shape_scores, JudgeVerdict, OracleJudge, TextJudge};
pub use prompt::{Intensity, PromptSpec, ShapeClass, Stripes, PROMPT_EMBED_DIM};
pub use render::{render_reference, sample_scene, shape_mask, Placement};
pub(crate) use render::sample_placement;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorldError {
    #[error("degenerate condition: {active} active cells (allowed {min}..={max})")]
    DegenerateCondition { active: usize, min: usize, max: usize },
    #[error("placement {0:?} does not keep the shape inside the canvas")]
    OutOfBounds(Placement),
    #[error("expected {expected} cells, got {got}")]
    BadLength { expected: usize, got: usize },
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn signed_margin(&self, v: f64) -> f64 {
        (v - self.lo).min(self.hi - v)
    }
}

/// All knobs of the synthetic world; lives in the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub dim_band: Band,
    pub bright_band: Band,
    /// Fill level rendered for each intensity class.
    pub dim_level: f64,
    pub bright_level: f64,
    pub stripe_amplitude: f64,
    pub noise_std: f64,
    /// Half-extents used when rendering each intensity class; the geometry
    /// therefore carries the attribute's default scale.
    pub dim_scales: Vec<u32>,
    pub bright_scales: Vec<u32>,
    /// Probability that a pretraining scene borrows its scale from the other
    /// intensity class. Small values make unusual scale/intensity pairs rare
    /// rather than impossible.
    pub p_scale_swap: f64,
    /// Weight of the centre cell in the extraction smoother; the four
    /// neighbours share the rest.
    pub smooth_center: f64,
    /// Extraction threshold; `None` derives it from the bands.
    pub tau: Option<f64>,
    pub iou_threshold: f64,
    pub orientation_threshold: f64,
    pub bias: BiasTable,
    /// Probability that a pretraining scene carries stripes.
    pub p_stripes: f64,
    /// Probability that a conflict target also requests a stripe orientation.
    pub p_target_stripes: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dim_band: Band { lo: 0.15, hi: 0.45 },
            bright_band: Band { lo: 0.6, hi: 0.95 },
            dim_level: 0.38,
            bright_level: 0.8,
            stripe_amplitude: 0.05,
            noise_std: 0.01,
            dim_scales: vec![3, 4],
            bright_scales: vec![5, 6],
            p_scale_swap: 0.1,
            smooth_center: 0.6,
            tau: None,
            iou_threshold: 0.6,
            orientation_threshold: 0.25,
            bias: BiasTable::default(),
            p_stripes: 0.5,
            p_target_stripes: 0.3,
        }
    }
}

impl WorldConfig {
    /// Half of the midpoint of the dead zone between the two bands.
    pub fn tau(&self) -> f64 {
        self.tau
            .unwrap_or(0.5 * 0.5 * (self.dim_band.hi + self.bright_band.lo))
    }

    pub fn band(&self, intensity: Intensity) -> Band {
        match intensity {
            Intensity::Dim => self.dim_band,
            Intensity::Bright => self.bright_band,
        }
    }

    pub fn level(&self, intensity: Intensity) -> f64 {
        match intensity {
            Intensity::Dim => self.dim_level,
            Intensity::Bright => self.bright_level,
        }
    }

    pub fn scales(&self, intensity: Intensity) -> &[u32] {
        match intensity {
            Intensity::Dim => &self.dim_scales,
            Intensity::Bright => &self.bright_scales,
        }
    }
}
