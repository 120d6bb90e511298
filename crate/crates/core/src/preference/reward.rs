use serde::{Deserialize, Serialize};

use super::PreferenceError;
use crate::diffusion::{
    noise_errors, prepare, Context, DenoiserModel, LossWeighting, ModelConfig, NoiseSchedule, NoisedSample, ParamVars,
};
use crate::numerics::{kernels, Graph, StreamRng, Tensor, Var};
use crate::world::{Canvas, CELLS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Text,
    Condition,
    /// Preferred and dispreferred differ in both directions at once, as in
    /// plain DPO data.
    Coupled,
}

/// Two canvases ranked under one shared context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub preferred: Canvas,
    pub dispreferred: Canvas,
    pub context: Context,
    pub kind: PairKind,
}

impl PreferencePair {
    pub fn new(preferred: Canvas, dispreferred: Canvas, context: Context, kind: PairKind) -> Self {
        Self {
            preferred,
            dispreferred,
            context,
            kind,
        }
    }

    pub fn swapped(&self) -> Self {
        Self {
            preferred: self.dispreferred.clone(),
            dispreferred: self.preferred.clone(),
            context: self.context.clone(),
            kind: self.kind,
        }
    }
}

/// Timesteps and noise used to score the two members of a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairNoise {
    pub t_plus: usize,
    pub eps_plus: Vec<f64>,
    pub t_minus: usize,
    pub eps_minus: Vec<f64>,
    /// Multipliers on the two members' rewards; 1 unless a timestep
    /// weighting was applied.
    pub weight_plus: f64,
    pub weight_minus: f64,
}

impl PairNoise {
    /// Both members see the same `(t, ε)`.
    pub fn shared(t: usize, eps: Vec<f64>) -> Self {
        Self {
            t_plus: t,
            eps_plus: eps.clone(),
            t_minus: t,
            eps_minus: eps,
            weight_plus: 1.0,
            weight_minus: 1.0,
        }
    }

    /// Draws a timestep and noise; with `common` the dispreferred member
    /// reuses the preferred member's draw.
    pub fn draw(rng: &mut StreamRng, schedule: &NoiseSchedule, common: bool) -> Self {
        let t = rng.below(schedule.steps());
        let eps = rng.normals(CELLS);
        if common {
            return Self::shared(t, eps);
        }
        let t_minus = rng.below(schedule.steps());
        let eps_minus = rng.normals(CELLS);
        Self {
            t_plus: t,
            eps_plus: eps,
            t_minus,
            eps_minus,
            weight_plus: 1.0,
            weight_minus: 1.0,
        }
    }

    /// Sets each member's reward weight to `weighting` at its timestep.
    pub fn weighted(mut self, weighting: LossWeighting, model: &ModelConfig, schedule: &NoiseSchedule) -> Self {
        self.weight_plus = weighting.weight(model, schedule.alpha_bar(self.t_plus));
        self.weight_minus = weighting.weight(model, schedule.alpha_bar(self.t_minus));
        self
    }

    fn unweighted(&self) -> bool {
        self.weight_plus == 1.0 && self.weight_minus == 1.0
    }

    pub fn swapped(&self) -> Self {
        Self {
            t_plus: self.t_minus,
            eps_plus: self.eps_minus.clone(),
            t_minus: self.t_plus,
            eps_minus: self.eps_plus.clone(),
            weight_plus: self.weight_minus,
            weight_minus: self.weight_plus,
        }
    }
}

/// A pair together with the noise it is scored under.
#[derive(Debug, Clone, Copy)]
pub struct ScoredPair<'a> {
    pub pair: &'a PreferencePair,
    pub noise: &'a PairNoise,
}

impl<'a> ScoredPair<'a> {
    pub fn new(pair: &'a PreferencePair, noise: &'a PairNoise) -> Self {
        Self { pair, noise }
    }

    fn members(&self) -> (NoisedSample, NoisedSample) {
        let n = self.noise;
        (
            NoisedSample {
                x0: self.pair.preferred.data().to_vec(),
                context: self.pair.context.clone(),
                t: n.t_plus,
                eps: n.eps_plus.clone(),
            },
            NoisedSample {
                x0: self.pair.dispreferred.data().to_vec(),
                context: self.pair.context.clone(),
                t: n.t_minus,
                eps: n.eps_minus.clone(),
            },
        )
    }
}

fn row_errors(pred: &Tensor, eps: &Tensor) -> Vec<f64> {
    let diff: Vec<f64> = eps.data().iter().zip(pred.data()).map(|(e, p)| e - p).collect();
    kernels::row_sq_norm(&diff, eps.cols())
}

/// Per-row `‖ε − ε_ref‖² − ‖ε − ε_θ‖²` as a `[B]` node. Only the policy
/// branch is differentiable; the reference errors enter as constants.
pub fn rewards_graph(
    model: &DenoiserModel,
    reference: &DenoiserModel,
    g: &mut Graph,
    params: &ParamVars,
    items: &[NoisedSample],
    schedule: &NoiseSchedule,
) -> Result<Var, PreferenceError> {
    if items.is_empty() {
        return Err(PreferenceError::EmptyBatch);
    }
    let (input, eps) = prepare(model, items, schedule)?;
    let ref_err = g.constant(Tensor::from_vec(row_errors(&reference.predict(&input), &eps)));
    let err = noise_errors(model, g, params, &input, &eps);
    Ok(g.sub(ref_err, err))
}

/// `r(preferred) − r(dispreferred)` for each pair, as a `[P]` node.
pub fn reward_differences_graph(
    model: &DenoiserModel,
    reference: &DenoiserModel,
    g: &mut Graph,
    params: &ParamVars,
    pairs: &[ScoredPair],
    schedule: &NoiseSchedule,
) -> Result<Var, PreferenceError> {
    let (plus, minus): (Vec<_>, Vec<_>) = pairs.iter().map(ScoredPair::members).unzip();
    let mut r_plus = rewards_graph(model, reference, g, params, &plus, schedule)?;
    let mut r_minus = rewards_graph(model, reference, g, params, &minus, schedule)?;
    if !pairs.iter().all(|p| p.noise.unweighted()) {
        let wp = g.constant(Tensor::from_vec(pairs.iter().map(|p| p.noise.weight_plus).collect()));
        let wm = g.constant(Tensor::from_vec(pairs.iter().map(|p| p.noise.weight_minus).collect()));
        r_plus = g.mul(r_plus, wp);
        r_minus = g.mul(r_minus, wm);
    }
    Ok(g.sub(r_plus, r_minus))
}

/// Reward of one clean sample under one `(t, ε)` draw.
pub fn sample_reward(
    model: &DenoiserModel,
    reference: &DenoiserModel,
    x0: &Canvas,
    context: &Context,
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<f64, PreferenceError> {
    let item = NoisedSample {
        x0: x0.data().to_vec(),
        context: context.clone(),
        t,
        eps: eps.to_vec(),
    };
    let (input, eps) = prepare(model, std::slice::from_ref(&item), schedule)?;
    let e_ref = row_errors(&reference.predict(&input), &eps)[0];
    let e = row_errors(&model.predict(&input), &eps)[0];
    Ok(e_ref - e)
}

pub fn reward_difference(
    model: &DenoiserModel,
    reference: &DenoiserModel,
    pair: &PreferencePair,
    noise: &PairNoise,
    schedule: &NoiseSchedule,
) -> Result<f64, PreferenceError> {
    let plus = sample_reward(model, reference, &pair.preferred, &pair.context, noise.t_plus, &noise.eps_plus, schedule)?;
    let minus = sample_reward(
        model,
        reference,
        &pair.dispreferred,
        &pair.context,
        noise.t_minus,
        &noise.eps_minus,
        schedule,
    )?;
    Ok(noise.weight_plus * plus - noise.weight_minus * minus)
}
