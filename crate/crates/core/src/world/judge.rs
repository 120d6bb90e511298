use serde::{Deserialize, Serialize};

use super::canvas::mask_iou;
use super::{
    extract_condition, shape_mask, Canvas, ConditionMap, Placement, PromptSpec, ShapeClass, Stripes,
    WorldConfig, SIDE,
};

/// Text-alignment verdict. `passed == (margin >= 0)`; a canvas whose
/// condition cannot be extracted gets `margin = -inf`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub passed: bool,
    pub margin: f64,
    pub shape_margin: f64,
    pub intensity_margin: Option<f64>,
    pub orientation_margin: Option<f64>,
}

impl JudgeVerdict {
    pub fn degenerate() -> Self {
        Self {
            passed: false,
            margin: f64::NEG_INFINITY,
            shape_margin: f64::NEG_INFINITY,
            intensity_margin: None,
            orientation_margin: None,
        }
    }
}

/// Anything that can decide whether a canvas depicts a prompt. The oracle
/// below is the default; an external service can implement this trait.
pub trait TextJudge: Sync {
    fn judge(&self, canvas: &Canvas, prompt: &PromptSpec) -> JudgeVerdict;
}

/// Deterministic rule-based judge over the synthetic world.
#[derive(Debug, Clone)]
pub struct OracleJudge {
    pub world: WorldConfig,
}

impl OracleJudge {
    pub fn new(world: WorldConfig) -> Self {
        Self { world }
    }
}

impl TextJudge for OracleJudge {
    fn judge(&self, canvas: &Canvas, prompt: &PromptSpec) -> JudgeVerdict {
        judge_text(canvas, prompt, &self.world)
    }
}

/// Best template IoU for each shape class, searched over small centre and
/// scale offsets around the mask's bounding box.
pub fn shape_scores(mask: &ConditionMap) -> [f64; 3] {
    let (mut x0, mut x1, mut y0, mut y1) = (SIDE, 0, SIDE, 0);
    for y in 0..SIDE {
        for x in 0..SIDE {
            if mask.at(x, y) {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    let cx = 0.5 * (x0 + x1) as f64;
    let cy = 0.5 * (y0 + y1) as f64;
    let half = 0.5 * (x1 - x0).max(y1 - y0) as f64;
    let mut best = [0.0f64; 3];
    for shape in ShapeClass::ALL {
        for dcx in [-0.5, 0.0, 0.5] {
            for dcy in [-0.5, 0.0, 0.5] {
                for dh in [-1.0, -0.5, 0.0, 0.5, 1.0] {
                    let h = half + dh;
                    if h < 1.0 {
                        continue;
                    }
                    let template = shape_mask(shape, Placement::new(cx + dcx, cy + dcy, h));
                    let iou = mask_iou(mask.cells(), &template);
                    best[shape.index()] = best[shape.index()].max(iou);
                }
            }
        }
    }
    best
}

/// `(S_y − S_x) / (S_y + S_x)` over neighbouring in-mask pairs, where `S_x`
/// sums |horizontal differences| and `S_y` |vertical differences|. Positive
/// values mean horizontal stripes.
pub fn orientation_statistic(canvas: &Canvas, mask: &ConditionMap) -> f64 {
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..SIDE {
        for x in 0..SIDE {
            if !mask.at(x, y) {
                continue;
            }
            if x + 1 < SIDE && mask.at(x + 1, y) {
                sx += (canvas.at(x + 1, y) - canvas.at(x, y)).abs();
            }
            if y + 1 < SIDE && mask.at(x, y + 1) {
                sy += (canvas.at(x, y + 1) - canvas.at(x, y)).abs();
            }
        }
    }
    (sy - sx) / (sy + sx + 1e-12)
}

/// Rule-based text check: shape template family, in-mask intensity band and
/// stripe orientation. Absent attributes are not checked.
pub fn judge_text(canvas: &Canvas, prompt: &PromptSpec, world: &WorldConfig) -> JudgeVerdict {
    let Ok(mask) = extract_condition(canvas, world) else {
        return JudgeVerdict::degenerate();
    };

    let scores = shape_scores(&mask);
    let want = scores[prompt.shape.index()];
    let best_other = ShapeClass::ALL
        .iter()
        .filter(|s| **s != prompt.shape)
        .map(|s| scores[s.index()])
        .fold(0.0, f64::max);
    let shape_margin = (want - world.iou_threshold).min(want - best_other);

    let intensity_margin = prompt.intensity.map(|i| {
        let (sum, n) = canvas
            .data()
            .iter()
            .zip(mask.cells())
            .filter(|(_, m)| **m)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        world.band(i).signed_margin(sum / n as f64)
    });

    let orientation_margin = prompt.stripes.map(|o| {
        let stat = orientation_statistic(canvas, &mask);
        let signed = match o {
            Stripes::Horizontal => stat,
            Stripes::Vertical => -stat,
        };
        signed - world.orientation_threshold
    });

    let margin = [Some(shape_margin), intensity_margin, orientation_margin]
        .into_iter()
        .flatten()
        .fold(f64::INFINITY, f64::min);
    JudgeVerdict {
        passed: margin >= 0.0,
        margin,
        shape_margin,
        intensity_margin,
        orientation_margin,
    }
}
