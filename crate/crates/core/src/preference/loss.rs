use serde::{Deserialize, Serialize};

use super::reward::reward_differences_graph;
use super::{alb_weights, AlbState, PairKind, PreferenceError, ScoredPair};
use crate::diffusion::{DenoiserModel, NoiseSchedule, ParamVars};
use crate::numerics::{Graph, Var};

/// Values of one decoupled objective evaluation. Losses and rewards are
/// batch means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_text: f64,
    pub l_cond: f64,
    pub w_text: f64,
    pub w_cond: f64,
    pub r_t: f64,
    pub r_c: f64,
}

fn finite(v: f64, term: &'static str) -> Result<f64, PreferenceError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(PreferenceError::NonFinite { term })
    }
}

fn check_kind(pairs: &[ScoredPair], expected: PairKind) -> Result<(), PreferenceError> {
    match pairs.iter().find(|p| p.pair.kind != expected) {
        Some(p) => Err(PreferenceError::WrongKind {
            expected,
            got: p.pair.kind,
        }),
        None => Ok(()),
    }
}

/// Batch mean of `−log σ(βT · Δ)`.
pub fn dpo_loss_from_diff(g: &mut Graph, diff: Var, beta_t: f64) -> Var {
    let z = g.scale(diff, beta_t);
    let ls = g.log_sigmoid(z);
    let m = g.mean(ls);
    g.scale(m, -1.0)
}

fn mean_value(g: &Graph, v: Var) -> f64 {
    let t = g.value(v);
    t.data().iter().sum::<f64>() / t.len() as f64
}

/// Single-pair DPO loss with one shared context per pair. Returns the loss
/// node and the mean reward difference.
#[allow(clippy::too_many_arguments)]
pub fn coupled_dpo_loss_graph(
    model: &DenoiserModel,
    reference: &DenoiserModel,
    g: &mut Graph,
    params: &ParamVars,
    pairs: &[ScoredPair],
    schedule: &NoiseSchedule,
    beta_t: f64,
) -> Result<(Var, f64), PreferenceError> {
    let diff = reward_differences_graph(model, reference, g, params, pairs, schedule)?;
    let r = finite(mean_value(g, diff), "reward difference")?;
    let loss = dpo_loss_from_diff(g, diff, beta_t);
    finite(g.item(loss), "dpo loss")?;
    Ok((loss, r))
}

pub fn coupled_dpo_loss(
    model: &DenoiserModel,
    reference: &DenoiserModel,
    pairs: &[ScoredPair],
    schedule: &NoiseSchedule,
    beta_t: f64,
) -> Result<f64, PreferenceError> {
    let mut g = Graph::new();
    let params = model.bind_frozen(&mut g);
    let (loss, _) = coupled_dpo_loss_graph(model, reference, &mut g, &params, pairs, schedule, beta_t)?;
    Ok(g.item(loss))
}

/// `−log σ(βT · (R_T + R_C))` over paired records: the entangled objective
/// obtained when both preference signals share one sigmoid.
#[allow(clippy::too_many_arguments)]
pub fn joint_coupled_loss_graph(
    model: &DenoiserModel,
    reference: &DenoiserModel,
    g: &mut Graph,
    params: &ParamVars,
    text: &[ScoredPair],
    cond: &[ScoredPair],
    schedule: &NoiseSchedule,
    beta_t: f64,
) -> Result<Var, PreferenceError> {
    if text.len() != cond.len() {
        return Err(PreferenceError::BatchMismatch {
            text: text.len(),
            cond: cond.len(),
        });
    }
    let rt = reward_differences_graph(model, reference, g, params, text, schedule)?;
    let rc = reward_differences_graph(model, reference, g, params, cond, schedule)?;
    let sum = g.add(rt, rc);
    let loss = dpo_loss_from_diff(g, sum, beta_t);
    finite(g.item(loss), "coupled loss")?;
    Ok(loss)
}

/// The decoupled objective `w_text · l_text + w_cond · l_cond`, with the
/// weights detached from the graph.
#[allow(clippy::too_many_arguments)]
pub fn bidedpo_loss_graph(
    model: &DenoiserModel,
    reference: &DenoiserModel,
    g: &mut Graph,
    params: &ParamVars,
    text: &[ScoredPair],
    cond: &[ScoredPair],
    schedule: &NoiseSchedule,
    beta_t: f64,
    alb: &mut AlbState,
) -> Result<(Var, LossBreakdown), PreferenceError> {
    if text.is_empty() || cond.is_empty() {
        return Err(PreferenceError::EmptyBatch);
    }
    if text.len() != cond.len() {
        return Err(PreferenceError::BatchMismatch {
            text: text.len(),
            cond: cond.len(),
        });
    }
    check_kind(text, PairKind::Text)?;
    check_kind(cond, PairKind::Condition)?;

    let rt = reward_differences_graph(model, reference, g, params, text, schedule)?;
    let r_t = finite(mean_value(g, rt), "r_t")?;
    let lt = dpo_loss_from_diff(g, rt, beta_t);
    let l_text = finite(g.item(lt), "l_text")?;

    let rc = reward_differences_graph(model, reference, g, params, cond, schedule)?;
    let r_c = finite(mean_value(g, rc), "r_c")?;
    let lc = dpo_loss_from_diff(g, rc, beta_t);
    let l_cond = finite(g.item(lc), "l_cond")?;

    let (wt, wc) = match alb.observe(l_text, l_cond) {
        Some((wt, wc)) => (g.scalar(wt), g.scalar(wc)),
        None if l_text + l_cond < 1e-12 => {
            let (wt, wc) = alb_weights(l_text, l_cond);
            (g.scalar(wt), g.scalar(wc))
        }
        None => {
            let sum = g.add(lt, lc);
            let inv = g.recip(sum);
            let ratio = g.mul(lt, inv);
            let wt = g.stop_gradient(ratio);
            let one = g.scalar(1.0);
            let wc = g.sub(one, wt);
            (wt, wc)
        }
    };
    let a = g.mul(wt, lt);
    let b = g.mul(wc, lc);
    let total = g.add(a, b);
    let breakdown = LossBreakdown {
        total: finite(g.item(total), "total")?,
        l_text,
        l_cond,
        w_text: g.item(wt),
        w_cond: g.item(wc),
        r_t,
        r_c,
    };
    Ok((total, breakdown))
}

/// Value-only evaluation of [`bidedpo_loss_graph`].
pub fn bidedpo_loss(
    model: &DenoiserModel,
    reference: &DenoiserModel,
    text: &[ScoredPair],
    cond: &[ScoredPair],
    schedule: &NoiseSchedule,
    beta_t: f64,
    alb: &mut AlbState,
) -> Result<LossBreakdown, PreferenceError> {
    let mut g = Graph::new();
    let params = model.bind_frozen(&mut g);
    let (_, b) = bidedpo_loss_graph(model, reference, &mut g, &params, text, cond, schedule, beta_t, alb)?;
    Ok(b)
}
