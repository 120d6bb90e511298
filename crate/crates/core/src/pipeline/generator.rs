use super::PipelineError;
use crate::diffusion::{sample_batch, Context, DenoiserModel, NoiseSchedule};
use crate::numerics::RngStream;
use crate::world::{mask_extent, sample_placement, render_reference, Canvas, Placement, WorldConfig, SIDE};

/// A conditional image source. Each request owns its RNG stream, so a
/// request's canvas must not depend on what else is in the batch.
pub trait Generator: Sync {
    fn generate(&self, requests: &[(&Context, RngStream)]) -> Result<Vec<Canvas>, PipelineError>;

    /// Identifies the generator in dataset manifests.
    fn fingerprint(&self) -> String;
}

/// The diffusion model with its ancestral sampler.
pub struct ModelGenerator<'a> {
    pub model: &'a DenoiserModel,
    pub schedule: &'a NoiseSchedule,
}

impl<'a> ModelGenerator<'a> {
    pub fn new(model: &'a DenoiserModel, schedule: &'a NoiseSchedule) -> Self {
        Self { model, schedule }
    }
}

impl Generator for ModelGenerator<'_> {
    fn generate(&self, requests: &[(&Context, RngStream)]) -> Result<Vec<Canvas>, PipelineError> {
        Ok(sample_batch(self.model, requests, self.schedule)?)
    }

    fn fingerprint(&self) -> String {
        self.model.content_hash()
    }
}

/// Renders the prompt exactly, placed on the condition's bounding box. Used
/// as an upper bound: it follows both the prompt and the condition.
#[derive(Debug, Clone)]
pub struct RenderGenerator {
    pub world: WorldConfig,
}

impl RenderGenerator {
    pub fn new(world: WorldConfig) -> Self {
        Self { world }
    }

    fn placement(&self, context: &Context, stream: &RngStream) -> Placement {
        match &context.condition {
            Some(mask) => {
                let p = mask_extent(mask);
                let half = p.half.clamp(1.0, (SIDE as f64 - 1.0) / 2.0);
                let max = SIDE as f64 - 1.0 - half;
                Placement::new(p.cx.clamp(half, max), p.cy.clamp(half, max), half)
            }
            None => {
                let mut rng = stream.child("placement", &[]).rng();
                let intensity = context
                    .prompt
                    .intensity
                    .unwrap_or_else(|| self.world.bias.sample_intensity(context.prompt.shape, &mut rng));
                sample_placement(&mut rng, &self.world, intensity)
            }
        }
    }
}

impl Generator for RenderGenerator {
    fn generate(&self, requests: &[(&Context, RngStream)]) -> Result<Vec<Canvas>, PipelineError> {
        requests
            .iter()
            .map(|(ctx, stream)| {
                let placement = self.placement(ctx, stream);
                let mut rng = stream.child("render", &[]).rng();
                Ok(render_reference(&ctx.prompt, placement, &mut rng, &self.world)?)
            })
            .collect()
    }

    fn fingerprint(&self) -> String {
        "render-reference".into()
    }
}
