//! Success ratio, condition fidelity and their semantic-guided variants.

mod benchmark;
mod metrics;

use std::path::PathBuf;

pub use benchmark::{
    make_test_set, read_report_json, run_benchmark, trajectory_svg, write_case_csv, write_report_json, CaseRow,
    MetricsReport, TestCase, TestSetConfig, MARGIN_CLIP,
};
pub use metrics::{
    cond_fidelity, f1_score, mask_fidelity, semantic_guided, ssim, success_ratio, Fidelity, MSE_SCALE, SSIM_C1,
    SSIM_C2,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty test set")]
    EmptyTestSet,
    #[error("{canvases} canvases for {prompts} prompts")]
    LengthMismatch { canvases: usize, prompts: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad report: {0}")]
    Report(String),
}
