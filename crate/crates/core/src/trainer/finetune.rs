use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::optim::{clip_grad_norm, AdamW};
use super::TrainError;
use crate::diffusion::{noise_errors, prepare, ArtifactStamp, DenoiserModel, LossWeighting, NoiseSchedule, NoisedSample};
use crate::numerics::{Graph, RngStream, Tensor};
use crate::pipeline::{mixed_dpo_view, naive_dpo_view, sft_view, PreferenceRecord};
use crate::preference::{
    bidedpo_loss_graph, coupled_dpo_loss_graph, AlbMode, AlbState, LossBreakdown, PairNoise, PreferencePair,
    ScoredPair,
};
use crate::world::CELLS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pretrain,
    Sft,
    DpoNaive,
    DpoMixed,
    Bidedpo,
    /// DPO on the text pairs alone.
    DpoText,
    /// DPO on the condition pairs alone.
    DpoCondition,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 8.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// The product `β·T` scaling reward differences inside the sigmoid.
    pub beta_t: f64,
    pub alb: AlbMode,
    pub lora: Option<LoraConfig>,
    /// Score both members of a pair under the same `(t, ε)`.
    pub common_noise: bool,
    /// Timestep weighting of the SFT objective.
    pub sft_weighting: LossWeighting,
    /// Probability of training an SFT sample with the null condition, which
    /// keeps the unconditioned path from drifting.
    pub p_drop_condition: f64,
    /// Timestep weighting of the per-sample rewards.
    pub reward_weighting: LossWeighting,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Bidedpo,
            steps: 800,
            batch_size: 8,
            lr: 1e-5,
            weight_decay: 0.01,
            grad_clip: 1.0,
            beta_t: 100.0,
            alb: AlbMode::InstanceMean,
            lora: None,
            common_noise: true,
            sft_weighting: LossWeighting::SnrCap { cap: 5.0 },
            p_drop_condition: 0.0,
            reward_weighting: LossWeighting::SnrCap { cap: 5.0 },
            seed: 0,
            dataset: None,
            checkpoint_in: None,
            checkpoint_out: None,
        }
    }
}

impl TrainConfig {
    /// Supervised fine-tuning on the dataset positives.
    pub fn sft_default() -> Self {
        Self {
            method: Method::Sft,
            steps: 2000,
            lr: 1e-4,
            p_drop_condition: 0.3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.method == Method::Pretrain {
            return bad("pretraining has its own entry point");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.p_drop_condition) {
            return bad("p_drop_condition must be in [0, 1]");
        }
        if !(self.lr >= 0.0) || !(self.beta_t > 0.0) || !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return bad("beta_t and grad_clip must be positive, lr and weight_decay non-negative");
        }
        if let Some(l) = self.lora {
            if l.rank == 0 || !(l.alpha > 0.0) {
                return bad("lora rank and alpha must be positive");
            }
        }
        AlbState::new(self.alb).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    /// Decoupled terms; present for the BideDPO method.
    pub breakdown: Option<LossBreakdown>,
    /// Mean reward difference of a single-objective DPO step.
    pub reward_diff: Option<f64>,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub final_checkpoint_hash: String,
    pub stamp: Option<ArtifactStamp>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine {
    Step(StepLog),
    Final {
        checkpoint_hash: String,
        #[serde(default)]
        stamp: Option<ArtifactStamp>,
    },
}

impl TrainLog {
    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for s in &self.steps {
            serde_json::to_writer(&mut f, &LogLine::Step(s.clone()))?;
            f.write_all(b"\n")?;
        }
        serde_json::to_writer(
            &mut f,
            &LogLine::Final {
                checkpoint_hash: self.final_checkpoint_hash.clone(),
                stamp: self.stamp.clone(),
            },
        )?;
        f.write_all(b"\n")?;
        f.flush()
    }

    pub fn read_jsonl(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut log = TrainLog::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str(line)? {
                LogLine::Step(s) => log.steps.push(s),
                LogLine::Final { checkpoint_hash, stamp } => {
                    log.final_checkpoint_hash = checkpoint_hash;
                    log.stamp = stamp;
                }
            }
        }
        Ok(log)
    }
}

/// Training items of one method, materialized once per run.
enum Data {
    Sft(Vec<(Vec<f64>, crate::diffusion::Context)>),
    Pairs(Vec<PreferencePair>),
    Decoupled(Vec<(PreferencePair, PreferencePair)>),
}

impl Data {
    fn new(method: Method, records: &[PreferenceRecord]) -> Self {
        match method {
            Method::Sft => Data::Sft(sft_view(records).into_iter().map(|(c, ctx)| (c.into_data(), ctx)).collect()),
            Method::DpoNaive => Data::Pairs(naive_dpo_view(records)),
            Method::DpoMixed => Data::Pairs(mixed_dpo_view(records).into_iter().map(|(p, _)| p).collect()),
            Method::DpoText => Data::Pairs(records.iter().map(|r| r.text_pair.clone()).collect()),
            Method::DpoCondition => Data::Pairs(records.iter().map(|r| r.cond_pair.clone()).collect()),
            Method::Bidedpo => Data::Decoupled(
                records
                    .iter()
                    .map(|r| (r.text_pair.clone(), r.cond_pair.clone()))
                    .collect(),
            ),
            Method::Pretrain => unreachable!("rejected by validate"),
        }
    }

    fn len(&self) -> usize {
        match self {
            Data::Sft(v) => v.len(),
            Data::Pairs(v) => v.len(),
            Data::Decoupled(v) => v.len(),
        }
    }
}

/// Noise for the pairs of one step. Text-direction pairs draw from the
/// `text` stream and condition pairs from `cond`, so runs that share a
/// direction see identical noise.
fn pair_noise(
    cfg: &TrainConfig,
    model: &DenoiserModel,
    stream: &RngStream,
    label: &str,
    step: usize,
    schedule: &NoiseSchedule,
) -> Vec<PairNoise> {
    (0..cfg.batch_size)
        .map(|i| {
            let mut rng = stream.child(label, &[step as u64, i as u64]).rng();
            PairNoise::draw(&mut rng, schedule, cfg.common_noise).weighted(cfg.reward_weighting, model.config(), schedule)
        })
        .collect()
}

fn direction_label(method: Method) -> &'static str {
    match method {
        Method::DpoCondition => "cond",
        _ => "text",
    }
}

/// Fine-tunes `start` on `records`. The reference for the DPO methods is a
/// frozen copy of `start`. Adapters, if any, are merged into the result.
pub fn finetune(
    cfg: &TrainConfig,
    start: &DenoiserModel,
    records: &[PreferenceRecord],
    schedule: &NoiseSchedule,
) -> Result<(DenoiserModel, TrainLog), TrainError> {
    let (model, mut log) = finetune_unmerged(cfg, start, records, schedule)?;
    let model = model.merge_adapters();
    log.final_checkpoint_hash = model.content_hash();
    Ok((model, log))
}

/// [`finetune`] without the final adapter merge.
pub fn finetune_unmerged(
    cfg: &TrainConfig,
    start: &DenoiserModel,
    records: &[PreferenceRecord],
    schedule: &NoiseSchedule,
) -> Result<(DenoiserModel, TrainLog), TrainError> {
    cfg.validate()?;
    let data = Data::new(cfg.method, records);
    if data.len() == 0 && cfg.steps > 0 {
        return Err(TrainError::EmptyDataset);
    }
    let reference = start.clone();
    let mut model = match cfg.lora {
        Some(l) => start.apply_lowrank_adapter(l.rank, l.alpha, &mut RngStream::named(cfg.seed, "lora", &[]).rng())?,
        None => start.clone(),
    };
    let root = RngStream::named(cfg.seed, "finetune", &[]);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut alb = AlbState::new(cfg.alb).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let mut log = TrainLog::default();
    let clock = Instant::now();

    for step in 0..cfg.steps {
        let mut rng = root.child("batch", &[step as u64]).rng();
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(data.len())).collect();
        let mut g = Graph::new();
        let params = model.bind(&mut g);
        let abort = |what: String, log: &TrainLog| TrainError::Aborted {
            step,
            what,
            log: Box::new(log.clone()),
        };

        let (loss, breakdown, reward_diff) = match &data {
            Data::Sft(items) => {
                let batch: Vec<NoisedSample> = idx
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| {
                        let mut r = root.child("sft", &[step as u64, i as u64]).rng();
                        let t = r.below(schedule.steps());
                        let mut context = items[k].1.clone();
                        if cfg.p_drop_condition > 0.0
                            && root.child("sft-drop", &[step as u64, i as u64]).rng().bernoulli(cfg.p_drop_condition)
                        {
                            context.condition = None;
                        }
                        NoisedSample {
                            x0: items[k].0.clone(),
                            context,
                            t,
                            eps: r.normals(CELLS),
                        }
                    })
                    .collect();
                let (input, eps) = prepare(&model, &batch, schedule)?;
                let err = noise_errors(&model, &mut g, &params, &input, &eps);
                let w: Vec<f64> = batch
                    .iter()
                    .map(|s| cfg.sft_weighting.weight(model.config(), schedule.alpha_bar(s.t)))
                    .collect();
                let w = g.constant(Tensor::from_vec(w));
                let weighted = g.mul(err, w);
                (g.mean(weighted), None, None)
            }
            Data::Pairs(pairs) => {
                let noise = pair_noise(cfg, &reference, &root, direction_label(cfg.method), step, schedule);
                let scored: Vec<ScoredPair> = idx.iter().zip(&noise).map(|(&k, n)| ScoredPair::new(&pairs[k], n)).collect();
                let (loss, r) = coupled_dpo_loss_graph(&model, &reference, &mut g, &params, &scored, schedule, cfg.beta_t)
                    .map_err(|e| abort(e.to_string(), &log))?;
                (loss, None, Some(r))
            }
            Data::Decoupled(pairs) => {
                let tn = pair_noise(cfg, &reference, &root, "text", step, schedule);
                let cn = pair_noise(cfg, &reference, &root, "cond", step, schedule);
                let text: Vec<ScoredPair> = idx.iter().zip(&tn).map(|(&k, n)| ScoredPair::new(&pairs[k].0, n)).collect();
                let cond: Vec<ScoredPair> = idx.iter().zip(&cn).map(|(&k, n)| ScoredPair::new(&pairs[k].1, n)).collect();
                let (loss, b) =
                    bidedpo_loss_graph(&model, &reference, &mut g, &params, &text, &cond, schedule, cfg.beta_t, &mut alb)
                        .map_err(|e| abort(e.to_string(), &log))?;
                (loss, Some(b), None)
            }
        };
        let value = g.item(loss);
        if !value.is_finite() {
            return Err(abort("loss".into(), &log));
        }
        let mut grads = g.reverse_grad(loss, params.trainable())?;
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(abort("gradient".into(), &log));
        }
        opt.step(model.trainable_params_mut(), &grads);
        log.steps.push(StepLog {
            step,
            loss: value,
            breakdown,
            reward_diff,
            grad_norm,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        });
        if step % 100 == 0 {
            log::debug!("{:?} step {step}: loss {value:.5}", cfg.method);
        }
    }
    log.final_checkpoint_hash = model.content_hash();
    Ok((model, log))
}
