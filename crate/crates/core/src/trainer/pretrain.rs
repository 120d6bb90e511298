use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::optim::{clip_grad_norm, AdamW};
use super::TrainError;
use crate::diffusion::{
    noise_errors, LossWeighting, prepare, sample_batch, simple_loss_graph, Context, DenoiserModel, ModelConfig, NoiseSchedule,
    NoisedSample,
};
use crate::numerics::{Graph, RngStream, Tensor};
use crate::world::{
    extract_condition, judge_text, render_reference, sample_scene, Intensity, PromptSpec, ShapeClass, WorldConfig,
    CELLS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`; the rate follows a cosine
    /// decay from `lr` to `lr · lr_floor`.
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Probability of training on the shape-only prompt of a scene.
    pub p_drop_attributes: f64,
    /// Probability of replacing the condition map with the null condition.
    pub p_drop_condition: f64,
    /// Per-sample weight on the noise error.
    pub weighting: LossWeighting,
    pub eval_samples: usize,
    pub min_shape_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 16000,
            batch_size: 32,
            lr: 1e-3,
            lr_floor: 0.05,
            weight_decay: 0.0,
            grad_clip: 1.0,
            p_drop_attributes: 0.3,
            p_drop_condition: 0.3,
            weighting: LossWeighting::SnrCap { cap: 5.0 },
            eval_samples: 500,
            min_shape_accuracy: 0.8,
        }
    }
}

/// Judged statistics of a base generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseStats {
    /// Samples drawn for each of the two measurements.
    pub samples: usize,
    /// Shape-only judge pass rate on unconflicted conditioned scenes.
    pub shape_accuracy: f64,
    /// Full-prompt judge pass rate on the same scenes.
    pub cond_pass_rate: f64,
    /// Shape-only judge pass rate without a condition.
    pub uncond_shape_accuracy: f64,
    /// Fraction judged bright among unconditioned samples with the right
    /// shape.
    pub p_bright: BTreeMap<ShapeClass, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    /// Mean simple loss over the last (up to) 100 steps.
    pub final_loss: f64,
    pub stats: BaseStats,
    pub checkpoint_hash: String,
}

/// Cosine decay from `lr` at step 0 to `lr · floor` at the last step.
pub fn cosine_lr(lr: f64, floor: f64, step: usize, steps: usize) -> f64 {
    let progress = if steps <= 1 { 0.0 } else { step as f64 / (steps - 1) as f64 };
    let c = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    lr * (floor + (1.0 - floor) * c)
}

/// One pretraining example drawn from the biased scene distribution.
pub fn pretrain_example(
    world: &WorldConfig,
    cfg: &PretrainConfig,
    schedule: &NoiseSchedule,
    stream: RngStream,
) -> NoisedSample {
    let mut rng = stream.rng();
    let (prompt, placement) = sample_scene(&mut rng, world);
    let canvas = render_reference(&prompt, placement, &mut rng, world).expect("scene placements fit the canvas");
    let condition = if rng.bernoulli(cfg.p_drop_condition) {
        None
    } else {
        extract_condition(&canvas, world).ok()
    };
    let prompt = if rng.bernoulli(cfg.p_drop_attributes) {
        PromptSpec::source(prompt.shape)
    } else {
        prompt
    };
    let t = rng.below(schedule.steps());
    let eps = rng.normals(CELLS);
    NoisedSample {
        x0: canvas.into_data(),
        context: Context { prompt, condition },
        t,
        eps,
    }
}

/// Trains the biased base generator from scratch on rendered scenes.
pub fn pretrain_base(
    world: &WorldConfig,
    model_cfg: &ModelConfig,
    schedule: &NoiseSchedule,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(DenoiserModel, PretrainReport), TrainError> {
    let mut model = DenoiserModel::new(model_cfg.clone(), &mut RngStream::named(seed, "init", &[]).rng());
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut recent = Vec::new();
    for step in 0..cfg.steps {
        let batch: Vec<NoisedSample> = (0..cfg.batch_size)
            .map(|i| pretrain_example(world, cfg, schedule, RngStream::named(seed, "pretrain", &[step as u64, i as u64])))
            .collect();
        let mut g = Graph::new();
        let params = model.bind(&mut g);
        let loss = match cfg.weighting {
            LossWeighting::Simple => simple_loss_graph(&model, &mut g, &params, &batch, schedule)?,
            weighting => {
                let (input, eps) = prepare(&model, &batch, schedule)?;
                let err = noise_errors(&model, &mut g, &params, &input, &eps);
                let w: Vec<f64> = batch
                    .iter()
                    .map(|s| weighting.weight(model_cfg, schedule.alpha_bar(s.t)))
                    .collect();
                let w = g.constant(Tensor::from_vec(w));
                let weighted = g.mul(err, w);
                g.mean(weighted)
            }
        };
        let value = g.item(loss);
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                what: "simple_loss".into(),
            });
        }
        let mut grads = g.reverse_grad(loss, params.trainable())?;
        clip_grad_norm(&mut grads, cfg.grad_clip);
        opt.lr = cosine_lr(cfg.lr, cfg.lr_floor, step, cfg.steps);
        opt.step(model.trainable_params_mut(), &grads);
        recent.push(value);
        if recent.len() > 100 {
            recent.remove(0);
        }
        if step % 500 == 0 {
            log::info!("pretrain step {step}: loss {value:.4}");
        }
    }
    let stats = measure_base(&model, world, schedule, cfg.eval_samples, RngStream::named(seed, "pretrain-eval", &[]))?;
    let report = PretrainReport {
        steps: cfg.steps,
        final_loss: if recent.is_empty() {
            f64::NAN
        } else {
            recent.iter().sum::<f64>() / recent.len() as f64
        },
        checkpoint_hash: model.content_hash(),
        stats,
    };
    log::info!(
        "pretrain done: shape accuracy {:.3}, conditioned pass {:.3}, p_bright {:?}",
        report.stats.shape_accuracy,
        report.stats.cond_pass_rate,
        report.stats.p_bright
    );
    if cfg.steps > 0 && report.stats.shape_accuracy < cfg.min_shape_accuracy {
        return Err(TrainError::PretrainFailed(Box::new(report)));
    }
    Ok((model, report))
}

/// Samples `n` unconflicted conditioned scenes and `n` shape-only prompts
/// without a condition, and judges both sets.
pub fn measure_base(
    model: &DenoiserModel,
    world: &WorldConfig,
    schedule: &NoiseSchedule,
    n: usize,
    stream: RngStream,
) -> Result<BaseStats, TrainError> {
    let mut contexts = Vec::with_capacity(2 * n);
    for i in 0..n {
        let mut rng = stream.child("scene", &[i as u64]).rng();
        let (prompt, placement) = sample_scene(&mut rng, world);
        let canvas = render_reference(&prompt, placement, &mut rng, world).expect("scene placements fit the canvas");
        contexts.push(Context {
            prompt,
            condition: extract_condition(&canvas, world).ok(),
        });
    }
    for i in 0..n {
        contexts.push(Context::unconditioned(PromptSpec::source(ShapeClass::ALL[i % 3])));
    }
    let reqs: Vec<(&Context, RngStream)> = contexts
        .iter()
        .enumerate()
        .map(|(i, c)| (c, stream.child("sample", &[i as u64])))
        .collect();
    let canvases = sample_batch(model, &reqs, schedule)?;
    let (cond, uncond) = canvases.split_at(n);
    let mut shape_ok = 0usize;
    let mut pass = 0usize;
    for (c, ctx) in cond.iter().zip(&contexts) {
        shape_ok += judge_text(c, &PromptSpec::source(ctx.prompt.shape), world).passed as usize;
        pass += judge_text(c, &ctx.prompt, world).passed as usize;
    }
    let mut uncond_ok = 0usize;
    let mut bright: BTreeMap<ShapeClass, (usize, usize)> = BTreeMap::new();
    for (c, ctx) in uncond.iter().zip(&contexts[n..]) {
        let shape = ctx.prompt.shape;
        if judge_text(c, &ctx.prompt, world).passed {
            uncond_ok += 1;
            let as_bright = PromptSpec::new(shape, Some(Intensity::Bright), None);
            let e = bright.entry(shape).or_default();
            e.1 += 1;
            if judge_text(c, &as_bright, world).passed {
                e.0 += 1;
            }
        }
    }
    let rate = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    Ok(BaseStats {
        samples: n,
        shape_accuracy: rate(shape_ok),
        cond_pass_rate: rate(pass),
        uncond_shape_accuracy: rate(uncond_ok),
        p_bright: bright
            .into_iter()
            .map(|(s, (b, total))| (s, b as f64 / total as f64))
            .collect(),
    })
}
