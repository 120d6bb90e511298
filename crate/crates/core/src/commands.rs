//! Config-driven entry points behind the command-line tool. Each command
//! maps every failure onto one of the process exit codes in [`ExitKind`].

use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, RunConfig};
use crate::diffusion::{load_checkpoint, save_checkpoint, DenoiserModel, DiffusionError, NoiseSchedule, MANIFEST_FILE};
use crate::evaluation::{trajectory_svg, EvalError, MetricsReport};
use crate::numerics::{NumericsError, RngStream};
use crate::pipeline::{read_dataset, write_dataset, BuildStats, PipelineError};
use crate::preference::{build_diagnostic_case, entanglement_diagnostic, EntanglementReport, PreferenceError};
use crate::trainer::{
    data_stage, eval_stage, pretrain_base, run_iterations, stage_seed, train_stage, write_evaluation, write_trained,
    IterationError, PretrainReport, RoundArtifacts, TrainError, TrainLog,
};

pub const PRETRAIN_REPORT: &str = "pretrain_report.json";
pub const DIAGNOSTIC_REPORT: &str = "diagnostic.json";
pub const RESOLVED_CONFIG: &str = "config.json";
pub const TRAJECTORY_SVG: &str = "trajectory.svg";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Config = 1,
    MissingFile = 2,
    Budget = 3,
    Numeric = 4,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        self as i32
    }
}

/// A module error tagged with the exit code it maps to. Displays and
/// chains exactly like the wrapped error.
#[derive(Debug)]
pub struct CommandError {
    pub kind: ExitKind,
    pub source: Box<dyn Error + Send + Sync>,
}

impl std::fmt::Display for CommandError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.source.fmt(f)
    }
}

impl Error for CommandError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        self.source.source()
    }
}

impl CommandError {
    fn new(kind: ExitKind, source: impl Error + Send + Sync + 'static) -> Self {
        Self {
            kind,
            source: Box::new(source),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.code()
    }
}

fn io_kind(e: &std::io::Error) -> ExitKind {
    if e.kind() == std::io::ErrorKind::NotFound {
        ExitKind::MissingFile
    } else {
        ExitKind::Config
    }
}

fn diffusion_kind(e: &DiffusionError) -> ExitKind {
    match e {
        DiffusionError::MissingFile(_) => ExitKind::MissingFile,
        DiffusionError::NonFinite { .. } | DiffusionError::Numerics(_) => ExitKind::Numeric,
        DiffusionError::Io { source, .. } => io_kind(source),
        _ => ExitKind::Config,
    }
}

fn pipeline_kind(e: &PipelineError) -> ExitKind {
    match e {
        PipelineError::BudgetExhausted { .. } | PipelineError::DegeneratePool { .. } => ExitKind::Budget,
        PipelineError::MissingFile(_) => ExitKind::MissingFile,
        PipelineError::Io { source, .. } => io_kind(source),
        PipelineError::Diffusion(d) => diffusion_kind(d),
        _ => ExitKind::Config,
    }
}

fn train_kind(e: &TrainError) -> ExitKind {
    match e {
        TrainError::NonFinite { .. } | TrainError::Aborted { .. } | TrainError::Numerics(_) => ExitKind::Numeric,
        TrainError::PretrainFailed(_) => ExitKind::Numeric,
        TrainError::Diffusion(d) => diffusion_kind(d),
        _ => ExitKind::Config,
    }
}

fn eval_kind(e: &EvalError) -> ExitKind {
    match e {
        EvalError::Io { source, .. } => io_kind(source),
        _ => ExitKind::Config,
    }
}

impl From<ConfigError> for CommandError {
    fn from(e: ConfigError) -> Self {
        let kind = match &e {
            ConfigError::MissingFile(_) => ExitKind::MissingFile,
            _ => ExitKind::Config,
        };
        Self::new(kind, e)
    }
}

impl From<DiffusionError> for CommandError {
    fn from(e: DiffusionError) -> Self {
        Self::new(diffusion_kind(&e), e)
    }
}

impl From<PipelineError> for CommandError {
    fn from(e: PipelineError) -> Self {
        Self::new(pipeline_kind(&e), e)
    }
}

impl From<TrainError> for CommandError {
    fn from(e: TrainError) -> Self {
        Self::new(train_kind(&e), e)
    }
}

impl From<EvalError> for CommandError {
    fn from(e: EvalError) -> Self {
        Self::new(eval_kind(&e), e)
    }
}

impl From<NumericsError> for CommandError {
    fn from(e: NumericsError) -> Self {
        Self::new(ExitKind::Numeric, e)
    }
}

impl From<PreferenceError> for CommandError {
    fn from(e: PreferenceError) -> Self {
        let kind = match &e {
            PreferenceError::NonFinite { .. } | PreferenceError::Numerics(_) => ExitKind::Numeric,
            PreferenceError::Diffusion(d) => diffusion_kind(d),
            _ => ExitKind::Config,
        };
        Self::new(kind, e)
    }
}

impl From<IterationError> for CommandError {
    fn from(e: IterationError) -> Self {
        let kind = match &e {
            IterationError::NoRounds => ExitKind::Config,
            IterationError::Pipeline { source, .. } => pipeline_kind(source),
            IterationError::Train { source, .. } => train_kind(source),
            IterationError::Eval { source, .. } => eval_kind(source),
            IterationError::Io { source, .. } => io_kind(source),
        };
        Self::new(kind, e)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CommandError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CommandError::new(io_kind(&e), e))?;
    }
    let json = serde_json::to_string_pretty(value).expect("artifact serializes");
    fs::write(path, json).map_err(|e| CommandError::new(io_kind(&e), e))
}

fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule, CommandError> {
    Ok(NoiseSchedule::linear(&cfg.schedule)?)
}

/// Pretrains the base generator and saves it to `out`.
pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<PretrainReport, CommandError> {
    let sched = schedule(cfg)?;
    let (model, report) = pretrain_base(&cfg.world, &cfg.model, &sched, &cfg.pretrain, stage_seed(cfg.seed, "pretrain", 0))?;
    save_checkpoint(&model, out, &cfg.stamp())?;
    write_json(&out.join(PRETRAIN_REPORT), &StampedPretrain { report: &report, stamp: cfg.stamp() })?;
    Ok(report)
}

#[derive(Serialize)]
struct StampedPretrain<'a> {
    report: &'a PretrainReport,
    stamp: crate::diffusion::ArtifactStamp,
}

/// Builds the preference dataset of `round` with the model in `checkpoint`.
pub fn cmd_generate_data(cfg: &RunConfig, checkpoint: &Path, round: usize, out: &Path) -> Result<BuildStats, CommandError> {
    let sched = schedule(cfg)?;
    let (model, _) = load_checkpoint(checkpoint)?;
    let (dataset, stats) = data_stage(&model, &sched, &cfg.iteration(), round, &cfg.stamp())?;
    write_dataset(&dataset, out)?;
    Ok(stats)
}

/// Fine-tunes the model in `checkpoint` on `dataset` and saves the result to
/// `out`. With no training steps configured the input is copied unchanged
/// and the dataset is not read.
pub fn cmd_train(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: &Path,
    round: usize,
    out: &Path,
) -> Result<String, CommandError> {
    let sched = schedule(cfg)?;
    let (start, _) = load_checkpoint(checkpoint)?;
    if !dataset.join(crate::pipeline::DATASET_MANIFEST).exists() {
        return Err(PipelineError::MissingFile(dataset.join(crate::pipeline::DATASET_MANIFEST)).into());
    }
    let stamp = cfg.stamp();
    let sft_steps = cfg.sft.as_ref().map_or(0, |s| s.steps);
    if sft_steps + cfg.dpo.steps == 0 {
        let log = TrainLog {
            steps: Vec::new(),
            final_checkpoint_hash: start.content_hash(),
            stamp: Some(stamp.clone()),
        };
        return Ok(write_trained(&start, None, &log, out, &stamp)?);
    }
    let data = read_dataset(dataset)?;
    let (model, sft_log, log) = train_stage(&cfg.iteration(), &start, &data.records, &sched, round, &stamp)?;
    Ok(write_trained(&model, sft_log.as_ref(), &log, out, &stamp)?)
}

/// Scores the model in `checkpoint` on the configured benchmark and writes
/// `report.json` and `cases.csv` into `out`.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, round: usize, out: &Path) -> Result<MetricsReport, CommandError> {
    let sched = schedule(cfg)?;
    let (model, _) = load_checkpoint(checkpoint)?;
    let (report, rows) = eval_stage(&model, &sched, &cfg.iteration(), round, &cfg.stamp())?;
    write_evaluation(&report, &rows, out)?;
    Ok(report)
}

/// Runs the configured number of rounds under `cfg.out_dir`. Without an
/// explicit base checkpoint, `out_dir/base` is reused when present and
/// pretrained otherwise.
pub fn cmd_iterate(cfg: &RunConfig, base: Option<&Path>) -> Result<Vec<RoundArtifacts>, CommandError> {
    let sched = schedule(cfg)?;
    let out = &cfg.out_dir;
    write_json(&out.join(RESOLVED_CONFIG), cfg)?;
    let base_dir: PathBuf = match base {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = out.join("base");
            if !dir.join(MANIFEST_FILE).exists() {
                cmd_pretrain(cfg, &dir)?;
            }
            dir
        }
    };
    let (model, _) = load_checkpoint(&base_dir)?;
    let rounds = run_iterations(&cfg.iteration(), &model, &sched, out, &cfg.stamp())?;
    let reports: Vec<MetricsReport> = rounds.iter().map(|r| r.report.clone()).collect();
    fs::write(out.join(TRAJECTORY_SVG), trajectory_svg(&reports)).map_err(|e| CommandError::new(io_kind(&e), e))?;
    Ok(rounds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSummary {
    pub cases: Vec<EntanglementReport>,
    /// Cases where the decoupled gradient is at least as aligned with the
    /// text gradient as the coupled one.
    pub decoupled_wins: usize,
    pub degenerate: usize,
    pub stamp: crate::diffusion::ArtifactStamp,
}

/// Builds `n` constructed conflict cases and compares gradient geometry.
pub fn cmd_diagnose(cfg: &RunConfig, n: usize, out: &Path) -> Result<DiagnosticSummary, CommandError> {
    let sched = schedule(cfg)?;
    let beta_t = cfg.dpo.beta_t;
    let mut cases = Vec::with_capacity(n);
    for i in 0..n {
        let stream = RngStream::named(cfg.seed, "diagnose", &[i as u64]);
        let case = build_diagnostic_case(&cfg.world, &sched, &cfg.model, beta_t, stream)?;
        cases.push(entanglement_diagnostic(
            &case.policy,
            &case.reference,
            &[case.text()],
            &[case.cond()],
            &sched,
            beta_t,
        )?);
    }
    let decoupled_wins = cases
        .iter()
        .filter(|r| matches!((r.cos_decoupled_text, r.cos_coupled_text), (Some(d), Some(c)) if d >= c))
        .count();
    let summary = DiagnosticSummary {
        degenerate: cases.iter().filter(|r| r.degenerate).count(),
        decoupled_wins,
        cases,
        stamp: cfg.stamp(),
    };
    write_json(&out.join(DIAGNOSTIC_REPORT), &summary)?;
    Ok(summary)
}

/// Loads a checkpoint, for callers that only need the model.
pub fn load_model(path: &Path) -> Result<DenoiserModel, CommandError> {
    Ok(load_checkpoint(path)?.0)
}
