use serde::{Deserialize, Serialize};

use super::{Canvas, Intensity, PromptSpec, ShapeClass, Stripes, WorldConfig, WorldError, CELLS, SIDE};
use crate::numerics::StreamRng;

/// Shape centre and half-extent in cell units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub cx: f64,
    pub cy: f64,
    pub half: f64,
}

impl Placement {
    pub fn new(cx: f64, cy: f64, half: f64) -> Self {
        Self { cx, cy, half }
    }

    pub fn inside_canvas(&self) -> bool {
        let max = (SIDE - 1) as f64;
        self.half >= 1.0
            && self.cx - self.half >= -1e-9
            && self.cy - self.half >= -1e-9
            && self.cx + self.half <= max + 1e-9
            && self.cy + self.half <= max + 1e-9
    }
}

const EPS: f64 = 1e-9;

fn cross_arm(half: f64) -> f64 {
    (half / 3.0).round().max(1.0)
}

/// Rasterized template of `shape` at `placement`.
pub fn shape_mask(shape: ShapeClass, p: Placement) -> Vec<bool> {
    let mut out = vec![false; CELLS];
    let arm = cross_arm(p.half);
    let r2 = (p.half + 0.5) * (p.half + 0.5);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let dx = (x as f64 - p.cx).abs();
            let dy = (y as f64 - p.cy).abs();
            out[y * SIDE + x] = match shape {
                ShapeClass::Square => dx <= p.half + EPS && dy <= p.half + EPS,
                ShapeClass::Disc => dx * dx + dy * dy <= r2 + EPS,
                ShapeClass::Cross => {
                    (dx <= arm + EPS && dy <= p.half + EPS) || (dy <= arm + EPS && dx <= p.half + EPS)
                }
            };
        }
    }
    out
}

/// Ground-truth renderer used for pretraining data and as an upper-bound
/// generator. A prompt without an intensity draws one from the bias table.
pub fn render_reference(
    prompt: &PromptSpec,
    placement: Placement,
    rng: &mut StreamRng,
    world: &WorldConfig,
) -> Result<Canvas, WorldError> {
    if !placement.inside_canvas() {
        return Err(WorldError::OutOfBounds(placement));
    }
    let intensity = prompt
        .intensity
        .unwrap_or_else(|| world.bias.sample_intensity(prompt.shape, rng));
    let level = world.level(intensity);
    let mask = shape_mask(prompt.shape, placement);
    let amp = world.stripe_amplitude;
    let mut data = vec![0.0; CELLS];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let i = y * SIDE + x;
            let mut v = 0.0;
            if mask[i] {
                v = level;
                match prompt.stripes {
                    Some(Stripes::Horizontal) => v += if y % 2 == 0 { amp } else { -amp },
                    Some(Stripes::Vertical) => v += if x % 2 == 0 { amp } else { -amp },
                    None => {}
                }
            }
            v += world.noise_std * rng.normal();
            data[i] = v.clamp(0.0, 1.0);
        }
    }
    Canvas::new(data)
}

/// Draws a fully specified pretraining scene: the intensity follows the bias
/// table and the scale follows the intensity class.
pub fn sample_scene(rng: &mut StreamRng, world: &WorldConfig) -> (PromptSpec, Placement) {
    let shape = ShapeClass::ALL[rng.below(3)];
    let intensity = world.bias.sample_intensity(shape, rng);
    let stripes = if rng.bernoulli(world.p_stripes) {
        Some(if rng.bernoulli(0.5) {
            Stripes::Horizontal
        } else {
            Stripes::Vertical
        })
    } else {
        None
    };
    let placement = sample_placement(rng, world, intensity);
    (PromptSpec::new(shape, Some(intensity), stripes), placement)
}

pub(crate) fn sample_placement(rng: &mut StreamRng, world: &WorldConfig, intensity: Intensity) -> Placement {
    let swap = rng.bernoulli(world.p_scale_swap);
    let scales = world.scales(if swap { intensity.opposite() } else { intensity });
    let half = scales[rng.below(scales.len())] as usize;
    let span = SIDE - 2 * half;
    let cx = half + rng.below(span);
    let cy = half + rng.below(span);
    Placement::new(cx as f64, cy as f64, half as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn out_of_bounds_rejected() {
        let w = WorldConfig::default();
        let mut rng = RngStream::new(1, 1).rng();
        let p = PromptSpec::new(ShapeClass::Square, Some(Intensity::Bright), None);
        let err = render_reference(&p, Placement::new(2.0, 8.0, 5.0), &mut rng, &w).unwrap_err();
        assert!(matches!(err, WorldError::OutOfBounds(_)));
    }

    #[test]
    fn render_is_deterministic() {
        let w = WorldConfig::default();
        let p = PromptSpec::new(ShapeClass::Disc, Some(Intensity::Dim), Some(Stripes::Vertical));
        let place = Placement::new(7.0, 8.0, 4.0);
        let a = render_reference(&p, place, &mut RngStream::new(3, 9).rng(), &w).unwrap();
        let b = render_reference(&p, place, &mut RngStream::new(3, 9).rng(), &w).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn bright_square_mean_in_band() {
        let w = WorldConfig::default();
        let p = PromptSpec::new(ShapeClass::Square, Some(Intensity::Bright), None);
        let place = Placement::new(7.0, 7.0, 5.0);
        let mask = shape_mask(ShapeClass::Square, place);
        for s in 0..20 {
            let c = render_reference(&p, place, &mut RngStream::new(s, 0).rng(), &w).unwrap();
            let (sum, n) = c
                .data()
                .iter()
                .zip(&mask)
                .filter(|(_, m)| **m)
                .fold((0.0, 0), |(s, n), (v, _)| (s + v, n + 1));
            let mean = sum / n as f64;
            assert!((0.75..=0.95).contains(&mean), "mean {mean}");
        }
    }

    #[test]
    fn template_sizes() {
        let p = Placement::new(7.0, 7.0, 3.0);
        let count = |s| shape_mask(s, p).iter().filter(|c| **c).count();
        assert_eq!(count(ShapeClass::Square), 49);
        assert_eq!(count(ShapeClass::Disc), 37);
        assert_eq!(count(ShapeClass::Cross), 33);
    }
}
