use serde::{Deserialize, Serialize};

use super::PreferenceRecord;
use crate::diffusion::Context;
use crate::preference::{PairKind, PreferencePair};
use crate::world::Canvas;

/// Positives only: the anchor under both of its contexts (`2·N` items).
pub fn sft_view(records: &[PreferenceRecord]) -> Vec<(Canvas, Context)> {
    records
        .iter()
        .flat_map(|r| {
            [
                (r.text_pair.preferred.clone(), r.text_pair.context.clone()),
                (r.cond_pair.preferred.clone(), r.cond_pair.context.clone()),
            ]
        })
        .collect()
}

/// The anchor against the text negative under `(target, s₁)`.
pub fn naive_dpo_view(records: &[PreferenceRecord]) -> Vec<PreferencePair> {
    records
        .iter()
        .map(|r| {
            PreferencePair::new(
                r.cond_pair.preferred.clone(),
                r.text_pair.dispreferred.clone(),
                r.cond_pair.context.clone(),
                PairKind::Coupled,
            )
        })
        .collect()
}

/// Which constraint the negative of a mixed pair violates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixedNegative {
    /// Text negative under `s₁`: wrong attribute and wrong geometry.
    Both,
    /// Condition negative under `s₁`.
    ConditionOnly,
    /// Text negative under `s₀`, which it follows.
    TextOnly,
}

/// Coupled pairs whose negative kind rotates with the record index.
pub fn mixed_dpo_view(records: &[PreferenceRecord]) -> Vec<(PreferencePair, MixedNegative)> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let (negative, context, kind) = match i % 3 {
                0 => (&r.text_pair.dispreferred, &r.cond_pair.context, MixedNegative::Both),
                1 => (&r.cond_pair.dispreferred, &r.cond_pair.context, MixedNegative::ConditionOnly),
                _ => (&r.text_pair.dispreferred, &r.text_pair.context, MixedNegative::TextOnly),
            };
            let pair = PreferencePair::new(r.anchor().clone(), negative.clone(), context.clone(), PairKind::Coupled);
            (pair, kind)
        })
        .collect()
}

pub fn bidedpo_view(records: &[PreferenceRecord]) -> Vec<(&PreferencePair, &PreferencePair)> {
    records.iter().map(|r| (&r.text_pair, &r.cond_pair)).collect()
}
