#![allow(dead_code)]

use bidedpo::diffusion::{timestep_embedding, Context, DenoiserModel, ModelConfig, NoiseSchedule, ScheduleConfig};
use bidedpo::numerics::{RngStream, StreamRng};
use bidedpo::preference::{PairKind, PairNoise, PreferencePair};
use bidedpo::world::{
    extract_condition, render_reference, sample_scene, Canvas, PromptSpec, WorldConfig, CELLS,
};

pub fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(&ScheduleConfig::default()).unwrap()
}

pub fn tiny_model(hidden: usize, seed: u64) -> DenoiserModel {
    DenoiserModel::new(
        ModelConfig {
            hidden,
            ..ModelConfig::default()
        },
        &mut RngStream::new(seed, 0).rng(),
    )
}

/// Copy of `model` with every trainable coordinate nudged by `N(0, std²)`.
pub fn perturbed(model: &DenoiserModel, std: f64, seed: u64) -> DenoiserModel {
    let mut out = model.clone();
    let mut rng = RngStream::new(seed, 77).rng();
    for p in out.trainable_params_mut() {
        for v in p.data_mut() {
            *v += std * rng.normal();
        }
    }
    out
}

pub fn scene_context(rng: &mut StreamRng, world: &WorldConfig) -> (Canvas, Context) {
    let (prompt, placement) = sample_scene(rng, world);
    let canvas = render_reference(&prompt, placement, rng, world).unwrap();
    let cond = extract_condition(&canvas, world).unwrap();
    (canvas, Context::new(prompt, cond))
}

pub fn random_canvas(rng: &mut StreamRng) -> Canvas {
    Canvas::new((0..CELLS).map(|_| rng.uniform()).collect()).unwrap()
}

pub fn random_pair(rng: &mut StreamRng, kind: PairKind, schedule: &NoiseSchedule) -> (PreferencePair, PairNoise) {
    let world = WorldConfig::default();
    let (preferred, context) = scene_context(rng, &world);
    let dispreferred = random_canvas(rng);
    let noise = PairNoise::draw(rng, schedule, true);
    (PreferencePair::new(preferred, dispreferred, context, kind), noise)
}

/// Source-only prompt variant used where the attribute must not matter.
pub fn source_prompt(p: &PromptSpec) -> PromptSpec {
    PromptSpec::source(p.shape)
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

/// Noise prediction computed with explicit loops straight from the weights.
pub fn oracle_eps(model: &DenoiserModel, x_t: &[f64], ctx: &Context, t: usize, schedule: &NoiseSchedule) -> Vec<f64> {
    let cfg = model.config();
    let mut h: Vec<f64> = x_t.to_vec();
    match &ctx.condition {
        Some(m) => h.extend(m.cells().iter().map(|&c| c as u8 as f64)),
        None => h.extend(std::iter::repeat(0.0).take(CELLS)),
    }
    h.extend(ctx.prompt.embed());
    h.extend(timestep_embedding(t, schedule.steps(), cfg.time_frequencies));
    let n_layers = model.layers().len();
    for (li, layer) in model.layers().iter().enumerate() {
        let w = &layer.weight;
        let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
        let mut z = layer.bias.data().to_vec();
        for j in 0..fan_out {
            for i in 0..fan_in {
                z[j] += h[i] * w.data()[i * fan_out + j];
            }
        }
        if let Some(a) = &layer.adapter {
            let s = a.alpha / a.rank as f64;
            for j in 0..fan_out {
                for k in 0..a.rank {
                    let mut d = 0.0;
                    for i in 0..fan_in {
                        d += h[i] * a.down.data()[i * a.rank + k];
                    }
                    z[j] += s * d * a.up.data()[k * fan_out + j];
                }
            }
        }
        h = if li + 1 < n_layers { z.into_iter().map(silu).collect() } else { z };
    }
    let (a, b) = cfg.coefficients(schedule.alpha_bar(t));
    x_t.iter().zip(&h).map(|(x, f)| a * x + b * f).collect()
}

/// `‖ε − ε_ref‖² − ‖ε − ε_θ‖²` from first principles.
pub fn oracle_reward(
    model: &DenoiserModel,
    reference: &DenoiserModel,
    x0: &[f64],
    ctx: &Context,
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> f64 {
    let ab = schedule.alpha_bar(t);
    let x_t: Vec<f64> = x0.iter().zip(eps).map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e).collect();
    let err = |m: &DenoiserModel| -> f64 {
        oracle_eps(m, &x_t, ctx, t, schedule)
            .iter()
            .zip(eps)
            .map(|(p, e)| (e - p) * (e - p))
            .sum()
    };
    err(reference) - err(model)
}

pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central differences at several step sizes for one coordinate, for
/// diagnosing a failed gradient check.
pub fn fd_probe(
    f: impl Fn(&mut bidedpo::numerics::Graph, &[bidedpo::numerics::Var]) -> bidedpo::numerics::Var,
    params: &[bidedpo::numerics::Tensor],
    at: (usize, usize),
) -> String {
    use bidedpo::numerics::Graph;
    let eval = |ps: &[bidedpo::numerics::Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<_> = ps.iter().map(|t| g.leaf(t.clone().with_requires_grad(true))).collect();
        let l = f(&mut g, &vars);
        let gr = g.reverse_grad(l, &vars).unwrap();
        (g.item(l), gr[at.0].data()[at.1])
    };
    let (l0, ad) = eval(params);
    let mut out = format!("loss {l0:e} analytic {ad:e}");
    for h in [1e-3, 1e-4, 1e-5, 1e-6, 1e-7] {
        let mut a = params.to_vec();
        a[at.0].data_mut()[at.1] += h;
        let mut b = params.to_vec();
        b[at.0].data_mut()[at.1] -= h;
        out += &format!("; h={h:e}: {:e}", (eval(&a).0 - eval(&b).0) / (2.0 * h));
    }
    out
}

pub mod gens {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use bidedpo::diffusion::Context;
    use bidedpo::numerics::RngStream;
    use bidedpo::pipeline::{Generator, PipelineError, RenderGenerator};
    use bidedpo::world::{Canvas, JudgeVerdict, PromptSpec, TextJudge, WorldConfig};

    pub struct AlwaysPass;
    pub struct AlwaysFail;

    fn verdict(passed: bool) -> JudgeVerdict {
        JudgeVerdict {
            passed,
            margin: if passed { 1.0 } else { -1.0 },
            shape_margin: 0.0,
            intensity_margin: None,
            orientation_margin: None,
        }
    }

    impl TextJudge for AlwaysPass {
        fn judge(&self, _: &Canvas, _: &PromptSpec) -> JudgeVerdict {
            verdict(true)
        }
    }

    impl TextJudge for AlwaysFail {
        fn judge(&self, _: &Canvas, _: &PromptSpec) -> JudgeVerdict {
            verdict(false)
        }
    }

    /// Exact renderer that, with probability `p_wrong` per draw, renders the
    /// opposite intensity of what the prompt asks for.
    pub struct FlakyGenerator {
        pub inner: RenderGenerator,
        pub p_wrong: f64,
    }

    impl FlakyGenerator {
        pub fn new(world: WorldConfig, p_wrong: f64) -> Self {
            Self {
                inner: RenderGenerator::new(world),
                p_wrong,
            }
        }
    }

    impl Generator for FlakyGenerator {
        fn generate(&self, requests: &[(&Context, RngStream)]) -> Result<Vec<Canvas>, PipelineError> {
            let mut out = Vec::with_capacity(requests.len());
            for (ctx, stream) in requests {
                let mut ctx = (*ctx).clone();
                if let Some(i) = ctx.prompt.intensity {
                    if stream.child("flaky", &[]).rng().bernoulli(self.p_wrong) {
                        ctx.prompt.intensity = Some(i.opposite());
                    }
                }
                out.extend(self.inner.generate(&[(&ctx, stream.clone())])?);
            }
            Ok(out)
        }

        fn fingerprint(&self) -> String {
            format!("flaky-{}", self.p_wrong)
        }
    }

    /// Counts every canvas requested from the wrapped generator.
    pub struct Counting<G> {
        pub inner: G,
        pub calls: AtomicUsize,
    }

    impl<G> Counting<G> {
        pub fn new(inner: G) -> Self {
            Self {
                inner,
                calls: AtomicUsize::new(0),
            }
        }

        pub fn count(&self) -> usize {
            self.calls.load(Ordering::SeqCst)
        }
    }

    impl<G: Generator> Generator for Counting<G> {
        fn generate(&self, requests: &[(&Context, RngStream)]) -> Result<Vec<Canvas>, PipelineError> {
            self.calls.fetch_add(requests.len(), Ordering::SeqCst);
            self.inner.generate(requests)
        }

        fn fingerprint(&self) -> String {
            self.inner.fingerprint()
        }
    }
}

/// The default base generator, pretrained once and cached under the cargo
/// target directory so every test binary shares it.
pub mod base {
    use std::path::PathBuf;
    use std::sync::OnceLock;

    use bidedpo::diffusion::{load_checkpoint, save_checkpoint, ArtifactStamp, DenoiserModel, ModelConfig};
    use bidedpo::trainer::{pretrain_base, PretrainConfig};
    use bidedpo::world::WorldConfig;

    pub const BASE_SEED: u64 = 1;

    pub fn dir() -> PathBuf {
        let key = serde_json::to_vec(&(
            PretrainConfig::default(),
            ModelConfig::default(),
            WorldConfig::default(),
            bidedpo::diffusion::ScheduleConfig::default(),
            BASE_SEED,
        ))
        .unwrap();
        let digest = &hex::encode(<sha2::Sha256 as sha2::Digest>::digest(&key))[..16];
        PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("base-{digest}"))
    }

    pub fn model() -> &'static DenoiserModel {
        static BASE: OnceLock<DenoiserModel> = OnceLock::new();
        BASE.get_or_init(|| {
            let dir = dir();
            if let Ok((m, _)) = load_checkpoint(&dir) {
                return m;
            }
            let (m, report) = pretrain_base(
                &WorldConfig::default(),
                &ModelConfig::default(),
                &super::schedule(),
                &PretrainConfig::default(),
                BASE_SEED,
            )
            .expect("base pretraining");
            let tmp = dir.with_extension(format!("tmp{}", std::process::id()));
            save_checkpoint(&m, &tmp, &ArtifactStamp::new("test-base", BASE_SEED)).unwrap();
            std::fs::write(tmp.join("pretrain_report.json"), serde_json::to_vec_pretty(&report).unwrap()).unwrap();
            // Another binary may have won the race; either copy is identical.
            if std::fs::rename(&tmp, &dir).is_err() {
                let _ = std::fs::remove_dir_all(&tmp);
            }
            m
        })
    }
}
