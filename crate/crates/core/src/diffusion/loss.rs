use super::{forward_noise, Context, DenoiserModel, DiffusionError, ModelInput, NoiseSchedule, ParamVars};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::numerics::{Graph, Tensor, Var};

/// One denoising target: clean canvas, context, timestep and the noise used
/// to corrupt it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSample {
    pub x0: Vec<f64>,
    pub context: Context,
    pub t: usize,
    pub eps: Vec<f64>,
}

/// Model input rows and the stacked noise targets for a list of samples.
pub fn prepare(
    model: &DenoiserModel,
    items: &[NoisedSample],
    schedule: &NoiseSchedule,
) -> Result<(ModelInput, Tensor), DiffusionError> {
    let mut xts = Vec::with_capacity(items.len());
    let mut eps = Vec::with_capacity(items.len() * items.first().map_or(0, |s| s.eps.len()));
    for s in items {
        xts.push(forward_noise(&s.x0, s.t, &s.eps, schedule)?);
        eps.extend_from_slice(&s.eps);
    }
    let views: Vec<&[f64]> = xts.iter().map(|x| x.as_slice()).collect();
    let ctx: Vec<&Context> = items.iter().map(|s| &s.context).collect();
    let ts: Vec<usize> = items.iter().map(|s| s.t).collect();
    let input = model.build_input(&views, &ctx, &ts, schedule)?;
    let n = input.rows();
    let eps = Tensor::new(vec![n, eps.len() / n.max(1)], eps)?;
    Ok((input, eps))
}

/// Per-row `‖ε − ε_θ(x_t, t, c)‖²` as a `[B]` graph node.
pub fn noise_errors(
    model: &DenoiserModel,
    g: &mut Graph,
    params: &ParamVars,
    input: &ModelInput,
    eps: &Tensor,
) -> Var {
    let e = g.constant(eps.clone());
    let pred = model.forward(g, params, input);
    let diff = g.sub(e, pred);
    g.row_sq_norm(diff)
}

/// Batch mean of `‖ε − ε_θ‖²` as a differentiable node.
pub fn simple_loss_graph(
    model: &DenoiserModel,
    g: &mut Graph,
    params: &ParamVars,
    items: &[NoisedSample],
    schedule: &NoiseSchedule,
) -> Result<Var, DiffusionError> {
    if items.is_empty() {
        return Err(DiffusionError::EmptyBatch);
    }
    let (input, eps) = prepare(model, items, schedule)?;
    let err = noise_errors(model, g, params, &input, &eps);
    Ok(g.mean(err))
}

/// Value of the simple loss without building a graph.
pub fn simple_loss(model: &DenoiserModel, items: &[NoisedSample], schedule: &NoiseSchedule) -> Result<f64, DiffusionError> {
    if items.is_empty() {
        return Err(DiffusionError::EmptyBatch);
    }
    let (input, eps) = prepare(model, items, schedule)?;
    let pred = model.predict(&input);
    let cells = eps.cols();
    let per: Vec<f64> = crate::numerics::kernels::row_sq_norm(
        &eps.data().iter().zip(pred.data()).map(|(e, p)| e - p).collect::<Vec<_>>(),
        cells,
    );
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Per-timestep weight on squared noise errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossWeighting {
    /// Plain `‖ε − ε̂‖²`.
    Simple,
    /// `min(SNR, cap) / SNR` with `SNR = ᾱ / (1 − ᾱ)`.
    SnrCap { cap: f64 },
    /// `1 / b²` for the model's output map `ε̂ = a·x_t + b·F`, i.e. a plain
    /// squared error on the network output.
    OutputSpace,
}

impl LossWeighting {
    pub fn weight(self, model: &ModelConfig, alpha_bar: f64) -> f64 {
        match self {
            LossWeighting::Simple => 1.0,
            LossWeighting::SnrCap { cap } => {
                let snr = alpha_bar / (1.0 - alpha_bar);
                snr.min(cap) / snr
            }
            LossWeighting::OutputSpace => {
                let (_, b) = model.coefficients(alpha_bar);
                1.0 / (b * b)
            }
        }
    }
}
