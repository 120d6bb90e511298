use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{cond_fidelity, semantic_guided, EvalError};
use crate::diffusion::{ArtifactStamp, Context};
use crate::numerics::RngStream;
use crate::pipeline::Generator;
use crate::world::{
    classify_conflict, extract_condition, is_held_out, make_conflict_case, render_reference, sample_placement,
    ConditionMap, ConflictKind, Intensity, PromptSpec, TextJudge, WorldConfig,
};

/// Judge margins are clipped to this range before averaging, so a
/// degenerate canvas (margin −∞) counts as a clear failure.
pub const MARGIN_CLIP: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub p_target: PromptSpec,
    pub s: ConditionMap,
    pub conflict_kind: ConflictKind,
}

impl TestCase {
    /// Content hash; per-case sampling streams derive from it, so results do
    /// not depend on the order of the test set.
    pub fn key(&self) -> String {
        let json = serde_json::to_vec(&(&self.p_target, &self.s)).expect("test case serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestSetConfig {
    pub n_cases: usize,
    /// Fraction of cases whose condition has the target's own scale, so the
    /// conflict comes from the model's bias alone.
    pub p_model_bias: f64,
}

impl Default for TestSetConfig {
    fn default() -> Self {
        Self {
            n_cases: 100,
            p_model_bias: 0.2,
        }
    }
}

/// Conflict cases drawn only from held-out prompt/placement combinations.
/// The condition is the mask of the source shape rendered at the majority
/// intensity's scale (or, for a `p_model_bias` fraction, at the target's).
pub fn make_test_set(world: &WorldConfig, cfg: &TestSetConfig, seed: u64) -> Vec<TestCase> {
    let mut out = Vec::with_capacity(cfg.n_cases);
    for i in 0..cfg.n_cases {
        let mut rng = RngStream::named(seed, "testset", &[i as u64]).rng();
        loop {
            let (source, target) = make_conflict_case(&mut rng, world);
            let Some(wanted) = target.intensity else { continue };
            let scale = if rng.bernoulli(cfg.p_model_bias) {
                wanted
            } else {
                world.bias.majority(target.shape).unwrap_or(Intensity::Bright)
            };
            let placement = sample_placement(&mut rng, &WorldConfig { p_scale_swap: 0.0, ..world.clone() }, scale);
            if !is_held_out(&target, placement) {
                continue;
            }
            let canvas = render_reference(&source, placement, &mut rng, world).expect("placements fit");
            let Ok(s) = extract_condition(&canvas, world) else { continue };
            out.push(TestCase {
                conflict_kind: classify_conflict(&target, &s, world),
                p_target: target,
                s,
            });
            break;
        }
    }
    out
}

/// Metrics of one generated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case: String,
    pub sample: usize,
    pub conflict_kind: ConflictKind,
    /// The canvas was not finite; no metrics were computed.
    pub failed_generation: bool,
    pub passed: bool,
    pub margin: f64,
    pub mse: f64,
    pub f1: f64,
    pub ssim: f64,
    pub sg_mse: f64,
    pub sg_f1: f64,
    pub sg_ssim: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sr: f64,
    pub mse: f64,
    pub f1: f64,
    pub ssim: f64,
    pub sg_mse: f64,
    pub sg_f1: f64,
    pub sg_ssim: f64,
    /// Mean judge margin, clipped to ±[`MARGIN_CLIP`].
    pub semantic_score: f64,
    pub n_cases: usize,
    pub samples_per_case: usize,
    pub failed_generations: usize,
    pub seed: u64,
    pub checkpoint_hash: String,
    pub iteration: Option<usize>,
    /// SSIM uses one global window over the 16×16 masks.
    pub ssim_window: String,
    #[serde(default)]
    pub stamp: Option<ArtifactStamp>,
}

/// Samples every case, scores each sample and aggregates. Failed
/// generations count as text failures for the success ratio and are left
/// out of the fidelity means.
pub fn run_benchmark(
    generator: &dyn Generator,
    judge: &dyn TextJudge,
    world: &WorldConfig,
    testset: &[TestCase],
    samples_per_case: usize,
    seed: u64,
) -> Result<(MetricsReport, Vec<CaseRow>), EvalError> {
    if testset.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let samples_per_case = samples_per_case.max(1);
    let mut cases: Vec<(String, &TestCase)> = testset.iter().map(|c| (c.key(), c)).collect();
    cases.sort_by(|a, b| a.0.cmp(&b.0));
    let contexts: Vec<Context> = cases
        .iter()
        .map(|(_, c)| Context::new(c.p_target.clone(), c.s.clone()))
        .collect();
    let mut requests = Vec::with_capacity(cases.len() * samples_per_case);
    for ((key, _), ctx) in cases.iter().zip(&contexts) {
        for j in 0..samples_per_case {
            let stream = RngStream::named(seed, "benchmark", &[j as u64]).child(key, &[]);
            requests.push((ctx, stream));
        }
    }
    let canvases: Vec<Option<crate::world::Canvas>> = match generator.generate(&requests) {
        Ok(all) => all.into_iter().map(Some).collect(),
        Err(_) => requests
            .iter()
            .map(|r| generator.generate(std::slice::from_ref(r)).ok().map(|mut v| v.remove(0)))
            .collect(),
    };

    let mut rows = Vec::with_capacity(canvases.len());
    for (i, canvas) in canvases.into_iter().enumerate() {
        let (key, case) = &cases[i / samples_per_case];
        let base = CaseRow {
            case: key.clone(),
            sample: i % samples_per_case,
            conflict_kind: case.conflict_kind,
            failed_generation: true,
            passed: false,
            margin: -MARGIN_CLIP,
            mse: f64::NAN,
            f1: f64::NAN,
            ssim: f64::NAN,
            sg_mse: f64::NAN,
            sg_f1: f64::NAN,
            sg_ssim: f64::NAN,
            degenerate: false,
        };
        let Some(canvas) = canvas.filter(|c| c.data().iter().all(|v| v.is_finite())) else {
            rows.push(base);
            continue;
        };
        let verdict = judge.judge(&canvas, &case.p_target);
        let fid = cond_fidelity(&canvas, &case.s, world);
        let (sg_mse, sg_f1, sg_ssim) = semantic_guided(&fid, &verdict);
        rows.push(CaseRow {
            failed_generation: false,
            passed: verdict.passed,
            margin: verdict.margin.clamp(-MARGIN_CLIP, MARGIN_CLIP),
            mse: fid.mse,
            f1: fid.f1,
            ssim: fid.ssim,
            sg_mse,
            sg_f1,
            sg_ssim,
            degenerate: fid.degenerate,
            ..base
        });
    }

    let n = rows.len() as f64;
    let ok: Vec<&CaseRow> = rows.iter().filter(|r| !r.failed_generation).collect();
    let mean = |f: &dyn Fn(&CaseRow) -> f64| {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
        }
    };
    let report = MetricsReport {
        sr: rows.iter().filter(|r| r.passed).count() as f64 / n,
        mse: mean(&|r| r.mse),
        f1: mean(&|r| r.f1),
        ssim: mean(&|r| r.ssim),
        sg_mse: mean(&|r| r.sg_mse),
        sg_f1: mean(&|r| r.sg_f1),
        sg_ssim: mean(&|r| r.sg_ssim),
        semantic_score: rows.iter().map(|r| r.margin).sum::<f64>() / n,
        n_cases: testset.len(),
        samples_per_case,
        failed_generations: rows.len() - ok.len(),
        seed,
        checkpoint_hash: generator.fingerprint(),
        iteration: None,
        ssim_window: "global".into(),
        stamp: None,
    };
    Ok((report, rows))
}

fn io(path: &Path, e: std::io::Error) -> EvalError {
    EvalError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn write_report_json(report: &MetricsReport, path: &Path) -> Result<(), EvalError> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, json).map_err(|e| io(path, e))
}

pub fn read_report_json(path: &Path) -> Result<MetricsReport, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    serde_json::from_str(&text).map_err(|e| EvalError::Report(format!("{}: {e}", path.display())))
}

pub fn write_case_csv(rows: &[CaseRow], path: &Path) -> Result<(), EvalError> {
    let mut out = String::from("case,sample,conflict_kind,failed_generation,passed,margin,mse,f1,ssim,sg_mse,sg_f1,sg_ssim,degenerate\n");
    for r in rows {
        let kind = serde_json::to_value(r.conflict_kind).expect("kind serializes");
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.case,
            r.sample,
            kind.as_str().unwrap_or(""),
            r.failed_generation,
            r.passed,
            r.margin,
            r.mse,
            r.f1,
            r.ssim,
            r.sg_mse,
            r.sg_f1,
            r.sg_ssim,
            r.degenerate
        )
        .expect("writing to a string");
    }
    std::fs::write(path, out).map_err(|e| io(path, e))
}

/// Line plot of SR and SG-F1 over iterations.
pub fn trajectory_svg(reports: &[MetricsReport]) -> String {
    let (w, h, pad) = (480.0, 240.0, 30.0);
    let n = reports.len().max(2) as f64 - 1.0;
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / n;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * v.clamp(0.0, 1.0);
    let mut svg = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    write!(
        svg,
        r#"<rect width="{w}" height="{h}" fill="white"/><line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#,
        h - pad,
        w - pad,
        h - pad,
        h - pad
    )
    .expect("string");
    for (label, color, f) in [
        ("SR", "steelblue", (|r: &MetricsReport| r.sr) as fn(&MetricsReport) -> f64),
        ("SG-F1", "darkorange", |r: &MetricsReport| r.sg_f1),
    ] {
        let points: Vec<String> = reports
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{:.1},{:.1}", x(i), y(f(r))))
            .collect();
        write!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/><text x="{}" y="{}" fill="{color}" font-size="12">{label}</text>"#,
            points.join(" "),
            w - pad - 40.0,
            if label == "SR" { pad } else { pad + 14.0 }
        )
        .expect("string");
    }
    svg.push_str("</svg>\n");
    svg
}
