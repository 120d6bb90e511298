use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ConditionMap, Intensity, Placement, PromptSpec, ShapeClass, Stripes, WorldConfig, SIDE};
use crate::numerics::StreamRng;

/// `P(bright | shape)` used for pretraining. Shapes without an entry are
/// unbiased (0.5).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasTable {
    pub p_bright: BTreeMap<ShapeClass, f64>,
}

impl Default for BiasTable {
    fn default() -> Self {
        Self {
            p_bright: BTreeMap::from([
                (ShapeClass::Square, 0.9),
                (ShapeClass::Disc, 0.9),
                (ShapeClass::Cross, 0.9),
            ]),
        }
    }
}

impl BiasTable {
    pub fn unbiased() -> Self {
        Self {
            p_bright: BTreeMap::new(),
        }
    }

    pub fn p_bright(&self, shape: ShapeClass) -> f64 {
        self.p_bright.get(&shape).copied().unwrap_or(0.5)
    }

    pub fn sample_intensity(&self, shape: ShapeClass, rng: &mut StreamRng) -> Intensity {
        if rng.bernoulli(self.p_bright(shape)) {
            Intensity::Bright
        } else {
            Intensity::Dim
        }
    }

    /// The attribute a biased model tends to produce, if any.
    pub fn majority(&self, shape: ShapeClass) -> Option<Intensity> {
        let p = self.p_bright(shape);
        if p > 0.5 {
            Some(Intensity::Bright)
        } else if p < 0.5 {
            Some(Intensity::Dim)
        } else {
            None
        }
    }
}

/// Draws a `(source, target)` prompt pair whose target intensity runs against
/// the pretraining bias of its shape.
pub fn make_conflict_case(rng: &mut StreamRng, world: &WorldConfig) -> (PromptSpec, PromptSpec) {
    let shape = ShapeClass::ALL[rng.below(3)];
    let random_intensity = if rng.bernoulli(0.5) {
        Intensity::Bright
    } else {
        Intensity::Dim
    };
    let intensity = world
        .bias
        .majority(shape)
        .map(Intensity::opposite)
        .unwrap_or(random_intensity);
    let stripes = if rng.bernoulli(world.p_target_stripes) {
        Some(if rng.bernoulli(0.5) {
            Stripes::Horizontal
        } else {
            Stripes::Vertical
        })
    } else {
        None
    };
    (
        PromptSpec::source(shape),
        PromptSpec::new(shape, Some(intensity), stripes),
    )
}

/// How a target prompt conflicts with a structural condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictKind {
    /// The condition's geometry carries the other intensity's scale.
    InputLevel,
    /// The geometry fits, but the requested intensity runs against the bias.
    ModelBias,
    None,
}

/// Centre and half-extent of the mask's bounding box.
pub fn mask_extent(mask: &ConditionMap) -> Placement {
    let (mut x0, mut x1, mut y0, mut y1) = (SIDE, 0, SIDE, 0);
    for y in 0..SIDE {
        for x in 0..SIDE {
            if mask.at(x, y) {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
    }
    Placement::new(
        0.5 * (x0 + x1) as f64,
        0.5 * (y0 + y1) as f64,
        0.5 * (x1 - x0).max(y1 - y0) as f64,
    )
}

/// Intensity class whose rendering scales are closest to the mask's extent.
pub fn scale_class(mask: &ConditionMap, world: &WorldConfig) -> Intensity {
    let half = mask_extent(mask).half;
    let dist = |i: Intensity| {
        world
            .scales(i)
            .iter()
            .map(|&s| (s as f64 - half).abs())
            .fold(f64::INFINITY, f64::min)
    };
    if dist(Intensity::Dim) <= dist(Intensity::Bright) {
        Intensity::Dim
    } else {
        Intensity::Bright
    }
}

pub fn classify_conflict(target: &PromptSpec, mask: &ConditionMap, world: &WorldConfig) -> ConflictKind {
    let Some(intensity) = target.intensity else {
        return ConflictKind::None;
    };
    if scale_class(mask, world) != intensity {
        ConflictKind::InputLevel
    } else if world.bias.majority(target.shape) == Some(intensity.opposite()) {
        ConflictKind::ModelBias
    } else {
        ConflictKind::None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use crate::world::shape_mask;

    #[test]
    fn biased_square_requests_dim() {
        let mut world = WorldConfig::default();
        world.bias = BiasTable {
            p_bright: BTreeMap::from([(ShapeClass::Square, 0.9)]),
        };
        for i in 0..200 {
            let (src, tgt) = make_conflict_case(&mut RngStream::new(0, i).rng(), &world);
            assert!(src.is_source());
            assert!(tgt.is_target());
            assert_eq!(src.shape, tgt.shape);
            if tgt.shape == ShapeClass::Square {
                assert_eq!(tgt.intensity, Some(Intensity::Dim));
            }
        }
    }

    #[test]
    fn unbiased_table_still_yields_targets() {
        let mut world = WorldConfig::default();
        world.bias = BiasTable::unbiased();
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..100 {
            let (_, tgt) = make_conflict_case(&mut RngStream::new(1, i).rng(), &world);
            assert!(tgt.is_target());
            seen.insert(tgt.intensity);
        }
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn conflict_kinds_follow_scale_and_bias() {
        let world = WorldConfig::default();
        let big = ConditionMap::new(shape_mask(ShapeClass::Square, Placement::new(8.0, 8.0, 6.0))).unwrap();
        let small = ConditionMap::new(shape_mask(ShapeClass::Square, Placement::new(8.0, 8.0, 3.0))).unwrap();
        assert_eq!(mask_extent(&big), Placement::new(8.0, 8.0, 6.0));
        let dim = PromptSpec::new(ShapeClass::Square, Some(Intensity::Dim), None);
        let bright = PromptSpec::new(ShapeClass::Square, Some(Intensity::Bright), None);
        assert_eq!(classify_conflict(&dim, &big, &world), ConflictKind::InputLevel);
        assert_eq!(classify_conflict(&dim, &small, &world), ConflictKind::ModelBias);
        assert_eq!(classify_conflict(&bright, &big, &world), ConflictKind::None);
        assert_eq!(classify_conflict(&bright, &small, &world), ConflictKind::InputLevel);
        assert_eq!(
            classify_conflict(&PromptSpec::source(ShapeClass::Square), &big, &world),
            ConflictKind::None
        );
    }
}
