use serde::{Deserialize, Serialize};

use super::loss::{bidedpo_loss_graph, dpo_loss_from_diff, joint_coupled_loss_graph};
use super::reward::{reward_difference, reward_differences_graph};
use super::{AlbMode, AlbState, PairKind, PairNoise, PreferenceError, PreferencePair, ScoredPair};
use crate::diffusion::{Context, DenoiserModel, ModelConfig, NoiseSchedule};
use crate::numerics::{kernels, Graph, RngStream, Tensor};
use crate::world::{extract_condition, make_conflict_case, render_reference, Intensity, Placement, PromptSpec, WorldConfig};

/// Upper bound on correction steps spent shaping a diagnostic policy.
pub const DIAGNOSTIC_TUNE_STEPS: usize = 200;

/// `βT·R_C` the shaped policy is driven to.
pub const DIAGNOSTIC_COND_MARGIN: f64 = 6.0;

/// Gradient geometry of the coupled and decoupled objectives on one batch
/// of paired records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntanglementReport {
    /// Cosine between the coupled-loss gradient and the text-loss gradient.
    /// `None` when either gradient has zero norm.
    pub cos_coupled_text: Option<f64>,
    /// Cosine between the decoupled total gradient and the text-loss gradient.
    pub cos_decoupled_text: Option<f64>,
    /// Mean `1 − σ(βT (R_T + R_C))`.
    pub prefactor_coupled: f64,
    /// Mean `1 − σ(βT R_T)`.
    pub prefactor_text: f64,
    /// Mean `1 − σ(βT R_C)`.
    pub prefactor_cond: f64,
    /// `prefactor_coupled / prefactor_text`.
    pub swallow_factor: f64,
    pub r_t: f64,
    pub r_c: f64,
    pub degenerate: bool,
}

fn flat_grad(
    model: &DenoiserModel,
    build: impl FnOnce(&mut Graph, &crate::diffusion::ParamVars) -> Result<crate::numerics::Var, PreferenceError>,
) -> Result<Vec<f64>, PreferenceError> {
    let mut g = Graph::new();
    let params = model.bind(&mut g);
    let loss = build(&mut g, &params)?;
    let grads = g.reverse_grad(loss, params.trainable())?;
    Ok(grads.into_iter().flat_map(Tensor::into_data).collect())
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Compares the gradient of the entangled objective with the gradients of
/// the separate text and condition objectives.
pub fn entanglement_diagnostic(
    model: &DenoiserModel,
    reference: &DenoiserModel,
    text: &[ScoredPair],
    cond: &[ScoredPair],
    schedule: &NoiseSchedule,
    beta_t: f64,
) -> Result<EntanglementReport, PreferenceError> {
    let coupled = flat_grad(model, |g, p| {
        joint_coupled_loss_graph(model, reference, g, p, text, cond, schedule, beta_t)
    })?;
    let text_grad = flat_grad(model, |g, p| {
        let d = reward_differences_graph(model, reference, g, p, text, schedule)?;
        Ok(dpo_loss_from_diff(g, d, beta_t))
    })?;
    let mut alb = AlbState::new(AlbMode::InstanceMean)?;
    let decoupled = flat_grad(model, |g, p| {
        bidedpo_loss_graph(model, reference, g, p, text, cond, schedule, beta_t, &mut alb).map(|(v, _)| v)
    })?;

    let (mut pc, mut pt, mut pk, mut rt, mut rc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (t, c) in text.iter().zip(cond) {
        let dt = reward_difference(model, reference, t.pair, t.noise, schedule)?;
        let dc = reward_difference(model, reference, c.pair, c.noise, schedule)?;
        pc += 1.0 - kernels::sigmoid(beta_t * (dt + dc));
        pt += 1.0 - kernels::sigmoid(beta_t * dt);
        pk += 1.0 - kernels::sigmoid(beta_t * dc);
        rt += dt;
        rc += dc;
    }
    let n = text.len().max(1) as f64;
    let (pc, pt, pk) = (pc / n, pt / n, pk / n);
    let cos_coupled_text = cosine(&coupled, &text_grad);
    let cos_decoupled_text = cosine(&decoupled, &text_grad);
    let degenerate = cos_coupled_text.is_none() || cos_decoupled_text.is_none() || pt == 0.0;
    Ok(EntanglementReport {
        cos_coupled_text,
        cos_decoupled_text,
        prefactor_coupled: pc,
        prefactor_text: pt,
        prefactor_cond: pk,
        swallow_factor: if pt > 0.0 { pc / pt } else { f64::NAN },
        r_t: rt / n,
        r_c: rc / n,
        degenerate,
    })
}

/// A conflict record plus a policy whose condition preference is already
/// strongly satisfied while its text preference is still undecided.
#[derive(Debug, Clone)]
pub struct DiagnosticCase {
    pub policy: DenoiserModel,
    pub reference: DenoiserModel,
    pub text_pair: PreferencePair,
    pub cond_pair: PreferencePair,
    pub text_noise: PairNoise,
    pub cond_noise: PairNoise,
    pub tune_steps: usize,
}

impl DiagnosticCase {
    pub fn text(&self) -> ScoredPair<'_> {
        ScoredPair::new(&self.text_pair, &self.text_noise)
    }

    pub fn cond(&self) -> ScoredPair<'_> {
        ScoredPair::new(&self.cond_pair, &self.cond_noise)
    }
}

/// Renders a conflict record with the ground-truth renderer and shapes a
/// policy from a fresh reference until `βT·R_C` is near
/// [`DIAGNOSTIC_COND_MARGIN`] while `|βT·R_T| ≤ 0.05`.
pub fn build_diagnostic_case(
    world: &WorldConfig,
    schedule: &NoiseSchedule,
    model_cfg: &ModelConfig,
    beta_t: f64,
    stream: RngStream,
) -> Result<DiagnosticCase, PreferenceError> {
    let mut rng = stream.rng();
    let (source, target) = make_conflict_case(&mut rng, world);
    let target_intensity = target.intensity.unwrap_or(Intensity::Dim);
    let source_intensity = target_intensity.opposite();
    let src_half = world.scales(source_intensity)[rng.below(world.scales(source_intensity).len())] as f64;
    let tgt_half = world.scales(target_intensity)[rng.below(world.scales(target_intensity).len())] as f64;
    let margin = src_half.max(tgt_half) + 2.0;
    let span = (crate::world::SIDE as f64 - 2.0 * margin) as usize;
    let cx = margin + rng.below(span.max(1)) as f64;
    let cy = margin + rng.below(span.max(1)) as f64;
    let render = |p: &PromptSpec, pl: Placement, rng: &mut crate::numerics::StreamRng| {
        render_reference(p, pl, rng, world).expect("diagnostic placements fit")
    };
    let src_canvas = render(
        &PromptSpec::new(source.shape, Some(source_intensity), None),
        Placement::new(cx, cy, src_half),
        &mut rng,
    );
    let anchor = render(&target, Placement::new(cx, cy, tgt_half), &mut rng);
    let shift = if rng.bernoulli(0.5) { 2.0 } else { -2.0 };
    let off = render(&target, Placement::new(cx + shift, cy - shift, tgt_half), &mut rng);
    let s0 = extract_condition(&src_canvas, world).expect("source mask");
    let s1 = extract_condition(&anchor, world).expect("anchor mask");
    let text_pair = PreferencePair::new(anchor.clone(), src_canvas, Context::new(target, s0), PairKind::Text);
    let cond_pair = PreferencePair::new(anchor, off, Context::new(target, s1), PairKind::Condition);
    let text_noise = PairNoise::draw(&mut rng, schedule, true);
    let cond_noise = PairNoise::draw(&mut rng, schedule, true);
    let reference = DenoiserModel::new(model_cfg.clone(), &mut rng);

    let tp = ScoredPair::new(&text_pair, &text_noise);
    let cp = ScoredPair::new(&cond_pair, &cond_noise);
    let reward_grad = |m: &DenoiserModel, p: ScoredPair| -> Result<(f64, Vec<f64>), PreferenceError> {
        let mut g = Graph::new();
        let params = m.bind(&mut g);
        let d = reward_differences_graph(m, &reference, &mut g, &params, &[p], schedule)?;
        let v = g.item(d);
        let s = g.sum(d);
        let grads = g.reverse_grad(s, params.trainable())?;
        Ok((v, grads.into_iter().flat_map(Tensor::into_data).collect()))
    };
    let shifted = |m: &DenoiserModel, dir: &[f64], step: f64| -> DenoiserModel {
        let mut out = m.clone();
        let mut k = 0;
        for p in out.trainable_params_mut() {
            for v in p.data_mut() {
                *v += step * dir[k];
                k += 1;
            }
        }
        out
    };

    // Move along the part of ∇R_C orthogonal to ∇R_T until βT·R_C reaches
    // the target, then cancel the second-order drift in R_T.
    let target = DIAGNOSTIC_COND_MARGIN;
    let mut policy = reference.clone();
    let mut steps = 0;
    for _ in 0..DIAGNOSTIC_TUNE_STEPS {
        let (rc, gc) = reward_grad(&policy, cp)?;
        let (rt, gt) = reward_grad(&policy, tp)?;
        if (beta_t * rc - target).abs() <= 0.5 && (beta_t * rt).abs() <= 0.05 {
            break;
        }
        steps += 1;
        let gt2: f64 = gt.iter().map(|v| v * v).sum();
        if gt2 > 0.0 && (beta_t * rt).abs() > 0.05 {
            policy = shifted(&policy, &gt, -rt / gt2);
            continue;
        }
        let proj = if gt2 > 0.0 {
            gc.iter().zip(&gt).map(|(a, b)| a * b).sum::<f64>() / gt2
        } else {
            0.0
        };
        let dir: Vec<f64> = gc.iter().zip(&gt).map(|(a, b)| a - proj * b).collect();
        let d2: f64 = dir.iter().map(|v| v * v).sum();
        if d2 == 0.0 {
            break;
        }
        // First-order step to the target margin, damped to stay local.
        let step = 0.5 * (target / beta_t - rc) / d2;
        policy = shifted(&policy, &dir, step);
    }
    Ok(DiagnosticCase {
        policy,
        reference,
        text_pair,
        cond_pair,
        text_noise,
        cond_noise,
        tune_steps: steps,
    })
}
