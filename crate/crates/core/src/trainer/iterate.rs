use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{finetune, Method, TrainConfig, TrainError, TrainLog};
use crate::diffusion::{load_checkpoint, save_checkpoint, ArtifactStamp, DenoiserModel, NoiseSchedule};
use crate::evaluation::{
    make_test_set, read_report_json, run_benchmark, write_case_csv, write_report_json, CaseRow, EvalError,
    MetricsReport, TestCase, TestSetConfig,
};
use crate::numerics::RngStream;
use crate::pipeline::{
    build_dataset, read_dataset, write_dataset, BuildStats, Dataset, ModelGenerator, PipelineConfig, PipelineError,
    PreferenceRecord,
};
use crate::world::{OracleJudge, WorldConfig};

/// Seed of one stage of one round, derived from the run seed.
pub fn stage_seed(seed: u64, stage: &str, round: usize) -> u64 {
    RngStream::named(seed, stage, &[round as u64]).rng().next_u64()
}

pub const DONE_FILE: &str = "DONE";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const SFT_LOG: &str = "sft_log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CASES_FILE: &str = "cases.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterationConfig {
    pub rounds: usize,
    pub seed: u64,
    pub world: WorldConfig,
    pub pipeline: PipelineConfig,
    /// Supervised warm-up on the round's positives; the preference stage
    /// then uses its result as the reference.
    pub sft: Option<TrainConfig>,
    pub preference: TrainConfig,
    pub testset: TestSetConfig,
    pub samples_per_case: usize,
}

impl Default for IterationConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            seed: 0,
            world: WorldConfig::default(),
            pipeline: PipelineConfig::default(),
            sft: Some(TrainConfig::sft_default()),
            preference: TrainConfig::default(),
            testset: TestSetConfig::default(),
            samples_per_case: 1,
        }
    }
}

impl IterationConfig {
    /// The fixed benchmark shared by every round.
    pub fn test_set(&self) -> Vec<TestCase> {
        make_test_set(&self.world, &self.testset, stage_seed(self.seed, "testset", 0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundArtifacts {
    pub round: usize,
    pub dir: PathBuf,
    pub checkpoint_hash: String,
    pub dataset_hash: String,
    pub report: MetricsReport,
}

#[derive(Debug, thiserror::Error)]
pub enum IterationError {
    #[error("rounds must be at least 1")]
    NoRounds,
    #[error("round {round}")]
    Pipeline {
        round: usize,
        #[source]
        source: PipelineError,
    },
    #[error("round {round}")]
    Train {
        round: usize,
        #[source]
        source: TrainError,
    },
    #[error("round {round}")]
    Eval {
        round: usize,
        #[source]
        source: EvalError,
    },
    #[error("round {round}: cannot write {path}")]
    Io {
        round: usize,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub fn round_dir(out: &Path, round: usize) -> PathBuf {
    out.join(format!("iter{round}"))
}

/// Builds the preference dataset of `round` with `model` as generator.
pub fn data_stage(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    cfg: &IterationConfig,
    round: usize,
    stamp: &ArtifactStamp,
) -> Result<(Dataset, BuildStats), PipelineError> {
    let judge = OracleJudge::new(cfg.world.clone());
    let generator = ModelGenerator::new(model, schedule);
    let (mut dataset, stats) =
        build_dataset(&generator, &judge, &cfg.world, &cfg.pipeline, stage_seed(cfg.seed, "data", round))?;
    dataset.manifest.stamp = stamp.clone();
    Ok((dataset, stats))
}

/// Fine-tunes `start` on `records`: optional SFT, then the preference
/// method with the SFT result as reference.
pub fn train_stage(
    cfg: &IterationConfig,
    start: &DenoiserModel,
    records: &[PreferenceRecord],
    schedule: &NoiseSchedule,
    round: usize,
    stamp: &ArtifactStamp,
) -> Result<(DenoiserModel, Option<TrainLog>, TrainLog), TrainError> {
    let (reference, sft_log) = match &cfg.sft {
        Some(sft) if sft.steps > 0 => {
            let sft = TrainConfig {
                method: Method::Sft,
                seed: stage_seed(cfg.seed, "sft", round),
                ..sft.clone()
            };
            let (m, mut log) = finetune(&sft, start, records, schedule)?;
            log.stamp = Some(stamp.clone());
            (m, Some(log))
        }
        _ => (start.clone(), None),
    };
    let pref = TrainConfig {
        seed: stage_seed(cfg.seed, "preference", round),
        ..cfg.preference.clone()
    };
    let (model, mut log) = finetune(&pref, &reference, records, schedule)?;
    log.stamp = Some(stamp.clone());
    Ok((model, sft_log, log))
}

/// Scores `model` on the fixed benchmark.
pub fn eval_stage(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    cfg: &IterationConfig,
    round: usize,
    stamp: &ArtifactStamp,
) -> Result<(MetricsReport, Vec<CaseRow>), EvalError> {
    let judge = OracleJudge::new(cfg.world.clone());
    let (mut report, rows) = run_benchmark(
        &ModelGenerator::new(model, schedule),
        &judge,
        &cfg.world,
        &cfg.test_set(),
        cfg.samples_per_case,
        stage_seed(cfg.seed, "evaluate", round),
    )?;
    report.iteration = Some(round);
    report.stamp = Some(stamp.clone());
    Ok((report, rows))
}

/// Writes a trained checkpoint with its logs alongside.
pub fn write_trained(
    model: &DenoiserModel,
    sft_log: Option<&TrainLog>,
    log: &TrainLog,
    dir: &Path,
    stamp: &ArtifactStamp,
) -> Result<String, TrainError> {
    let manifest = save_checkpoint(model, dir, stamp)?;
    let write = |log: &TrainLog, name: &str| {
        let path = dir.join(name);
        log.write_jsonl(&path).map_err(|source| {
            TrainError::Diffusion(crate::diffusion::DiffusionError::Io { path, source })
        })
    };
    if let Some(l) = sft_log {
        write(l, SFT_LOG)?;
    }
    write(log, TRAIN_LOG)?;
    Ok(manifest.content_hash)
}

pub fn write_evaluation(report: &MetricsReport, rows: &[CaseRow], dir: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(dir).map_err(|source| EvalError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_report_json(report, &dir.join(REPORT_FILE))?;
    write_case_csv(rows, &dir.join(CASES_FILE))
}

/// Alternates data generation with the current model and fine-tuning, for
/// `cfg.rounds` rounds. A round whose directory holds a `DONE` marker is
/// loaded instead of recomputed, so an interrupted run resumes where it
/// stopped.
pub fn run_iterations(
    cfg: &IterationConfig,
    base: &DenoiserModel,
    schedule: &NoiseSchedule,
    out: &Path,
    stamp: &ArtifactStamp,
) -> Result<Vec<RoundArtifacts>, IterationError> {
    if cfg.rounds == 0 {
        return Err(IterationError::NoRounds);
    }
    let mut current = base.clone();
    let mut done = Vec::new();
    for round in 1..=cfg.rounds {
        let dir = round_dir(out, round);
        let pipe = |source| IterationError::Pipeline { round, source };
        let train = |source| IterationError::Train { round, source };
        let eval = |source| IterationError::Eval { round, source };
        if dir.join(DONE_FILE).exists() {
            let (model, manifest) = load_checkpoint(&dir.join("checkpoint")).map_err(|e| train(e.into()))?;
            let report = read_report_json(&dir.join(REPORT_FILE)).map_err(eval)?;
            let dataset = read_dataset(&dir.join("dataset")).map_err(pipe)?;
            log::info!("round {round}: resumed from {}", dir.display());
            done.push(RoundArtifacts {
                round,
                dir,
                checkpoint_hash: manifest.content_hash,
                dataset_hash: dataset.manifest.content_hash(),
                report,
            });
            current = model;
            continue;
        }

        let (dataset, stats) = data_stage(&current, schedule, cfg, round, stamp).map_err(pipe)?;
        log::info!(
            "round {round}: {} records from {} attempts",
            stats.records,
            stats.attempts
        );
        write_dataset(&dataset, &dir.join("dataset")).map_err(pipe)?;

        let (model, sft_log, log) = train_stage(cfg, &current, &dataset.records, schedule, round, stamp).map_err(train)?;
        let checkpoint_hash =
            write_trained(&model, sft_log.as_ref(), &log, &dir.join("checkpoint"), stamp).map_err(train)?;

        let (report, rows) = eval_stage(&model, schedule, cfg, round, stamp).map_err(eval)?;
        write_evaluation(&report, &rows, &dir).map_err(eval)?;

        let dataset_hash = dataset.manifest.content_hash();
        let marker = dir.join(DONE_FILE);
        fs::write(&marker, &dataset_hash).map_err(|source| IterationError::Io {
            round,
            path: marker,
            source,
        })?;
        log::info!("round {round}: sr {:.3}, sg_mse {:.1}", report.sr, report.sg_mse);
        done.push(RoundArtifacts {
            round,
            dir,
            checkpoint_hash,
            dataset_hash,
            report,
        });
        current = model;
    }
    Ok(done)
}
