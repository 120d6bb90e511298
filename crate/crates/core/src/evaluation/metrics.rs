use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::world::{extract_condition, Canvas, ConditionMap, JudgeVerdict, PromptSpec, TextJudge, WorldConfig};

/// MSE scale: masks are compared as {0, 1} images and reported in 8-bit
/// squared units.
pub const MSE_SCALE: f64 = 255.0 * 255.0;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Condition-fidelity metrics of one canvas against its input condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub mse: f64,
    pub f1: f64,
    pub ssim: f64,
    /// No condition could be extracted; the metrics are the worst values.
    pub degenerate: bool,
}

impl Fidelity {
    pub fn worst() -> Self {
        Self {
            mse: MSE_SCALE,
            f1: 0.0,
            ssim: 0.0,
            degenerate: true,
        }
    }
}

/// Global (single-window) SSIM with population statistics.
pub fn ssim(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    va /= n;
    vb /= n;
    cov /= n;
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// `2·TP / (2·TP + FP + FN)` with `given` as ground truth. Two empty masks
/// score 1.
pub fn f1_score(predicted: &[bool], given: &[bool]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in predicted.iter().zip(given) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

pub fn mask_fidelity(extracted: &ConditionMap, given: &ConditionMap) -> Fidelity {
    let a = extracted.to_f64();
    let b = given.to_f64();
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Fidelity {
        mse: mse * MSE_SCALE,
        f1: f1_score(extracted.cells(), given.cells()),
        ssim: ssim(&a, &b),
        degenerate: false,
    }
}

/// Extracts the canvas's condition and compares it with `given`.
pub fn cond_fidelity(canvas: &Canvas, given: &ConditionMap, world: &WorldConfig) -> Fidelity {
    match extract_condition(canvas, world) {
        Ok(mask) => mask_fidelity(&mask, given),
        Err(_) => Fidelity::worst(),
    }
}

/// Text failure doubles the MSE and zeroes F1 and SSIM.
pub fn semantic_guided(f: &Fidelity, verdict: &JudgeVerdict) -> (f64, f64, f64) {
    if verdict.passed {
        (f.mse, f.f1, f.ssim)
    } else {
        (2.0 * f.mse, 0.0, 0.0)
    }
}

/// Fraction of canvases the judge accepts for their prompts.
pub fn success_ratio(canvases: &[Canvas], prompts: &[PromptSpec], judge: &dyn TextJudge) -> Result<f64, EvalError> {
    if canvases.len() != prompts.len() {
        return Err(EvalError::LengthMismatch {
            canvases: canvases.len(),
            prompts: prompts.len(),
        });
    }
    if canvases.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let passed = canvases
        .iter()
        .zip(prompts)
        .filter(|(c, p)| judge.judge(c, p).passed)
        .count();
    Ok(passed as f64 / canvases.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{shape_mask, Placement, ShapeClass};

    #[test]
    fn identical_masks_are_perfect() {
        let m = ConditionMap::new(shape_mask(ShapeClass::Disc, Placement::new(7.0, 8.0, 4.0))).unwrap();
        let f = mask_fidelity(&m, &m);
        assert_eq!((f.mse, f.f1), (0.0, 1.0));
        assert!((f.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sg_penalty() {
        let f = Fidelity {
            mse: 100.0,
            f1: 0.8,
            ssim: 0.9,
            degenerate: false,
        };
        let mut v = JudgeVerdict::degenerate();
        assert_eq!(semantic_guided(&f, &v), (200.0, 0.0, 0.0));
        v.passed = true;
        assert_eq!(semantic_guided(&f, &v), (100.0, 0.8, 0.9));
    }
}
