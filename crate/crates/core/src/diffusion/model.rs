use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DiffusionError, NoiseSchedule};
use crate::numerics::{kernels, Graph, StreamRng, Tensor, Var};
use crate::world::{ConditionMap, PromptSpec, CELLS, PROMPT_EMBED_DIM};

/// Architecture knobs. The default is the full-size denoiser; tests shrink
/// `hidden` to keep finite-difference sweeps cheap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub time_frequencies: usize,
    pub output: OutputKind,
    /// Data scale used by [`OutputKind::Preconditioned`].
    pub sigma_data: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            time_frequencies: 8,
            output: OutputKind::Sample,
            sigma_data: 0.4,
        }
    }
}

/// What the network's last layer estimates. Every kind is turned into a
/// noise prediction by a fixed per-timestep affine map `ε̂ = a·x_t + b·F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// `F = ε̂` directly.
    Epsilon,
    /// `F = x̂0`, so `ε̂ = (x_t − √ᾱ·F) / √(1−ᾱ)`.
    Sample,
    /// `F = v̂ = √ᾱ·ε − √(1−ᾱ)·x0`, so `ε̂ = √(1−ᾱ)·x_t + √ᾱ·F`.
    Velocity,
    /// Skip-connected clean estimate `x̂0 = c_skip·x̃ + c_out·F` on the
    /// rescaled input `x̃ = x_t / √ᾱ` with noise level `s = √((1−ᾱ)/ᾱ)`,
    /// `c_skip = σ_d² / (s² + σ_d²)` and `c_out = s·σ_d / √(s² + σ_d²)`.
    /// The map from `F` to `ε̂` has gain at most 1 at every timestep.
    Preconditioned,
}

impl OutputKind {
    /// `(a, b)` with `ε̂ = a·x_t + b·F` at cumulative signal level
    /// `alpha_bar`; `sigma_data` only matters for the preconditioned kind.
    pub fn coefficients(self, alpha_bar: f64, sigma_data: f64) -> (f64, f64) {
        let sigma = (1.0 - alpha_bar).sqrt();
        match self {
            OutputKind::Epsilon => (0.0, 1.0),
            OutputKind::Sample => (1.0 / sigma, -alpha_bar.sqrt() / sigma),
            OutputKind::Velocity => (sigma, alpha_bar.sqrt()),
            OutputKind::Preconditioned => {
                let s = sigma / alpha_bar.sqrt();
                let d2 = sigma_data * sigma_data;
                (s / (alpha_bar.sqrt() * (s * s + d2)), -sigma_data / (s * s + d2).sqrt())
            }
        }
    }
}

impl ModelConfig {
    /// `(a, b)` of this model's output map at `alpha_bar`.
    pub fn coefficients(&self, alpha_bar: f64) -> (f64, f64) {
        self.output.coefficients(alpha_bar, self.sigma_data)
    }

    pub fn input_dim(&self) -> usize {
        2 * CELLS + PROMPT_EMBED_DIM + 2 * self.time_frequencies
    }
}

/// A prompt plus an optional condition map. `None` feeds an all-zero map,
/// which the base model learns through condition dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub prompt: PromptSpec,
    pub condition: Option<ConditionMap>,
}

impl Context {
    pub fn new(prompt: PromptSpec, condition: ConditionMap) -> Self {
        Self {
            prompt,
            condition: Some(condition),
        }
    }

    pub fn unconditioned(prompt: PromptSpec) -> Self {
        Self {
            prompt,
            condition: None,
        }
    }
}

/// `(sin, cos)` of `2^k · π · t / steps` for `k < freqs`.
pub fn timestep_embedding(t: usize, steps: usize, freqs: usize) -> Vec<f64> {
    let s = t as f64 / steps as f64;
    let mut out = Vec::with_capacity(2 * freqs);
    for k in 0..freqs {
        let angle = (1u64 << k) as f64 * std::f64::consts::PI * s;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

/// Trainable low-rank update `scale · down · up` added to a dense weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    pub rank: usize,
    pub alpha: f64,
    /// `[in, rank]`, random init.
    pub down: Tensor,
    /// `[rank, out]`, zero init.
    pub up: Tensor,
}

impl LowRankAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[in, out]`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub adapter: Option<LowRankAdapter>,
}

impl Dense {
    fn init(fan_in: usize, fan_out: usize, gain: f64, rng: &mut StreamRng) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let w = rng.normals(fan_in * fan_out).into_iter().map(|v| v * std).collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], w).expect("shape"),
            bias: Tensor::zeros(vec![fan_out]),
            adapter: None,
        }
    }

    fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    fn apply(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (i, o) = (self.fan_in(), self.fan_out());
        let mut z = kernels::matmul(x, self.weight.data(), rows, i, o);
        if let Some(a) = &self.adapter {
            let d = kernels::matmul(x, a.down.data(), rows, i, a.rank);
            let u = kernels::matmul(&d, a.up.data(), rows, a.rank, o);
            let s = a.scale();
            for (zv, uv) in z.iter_mut().zip(u) {
                *zv += uv * s;
            }
        }
        kernels::add_row_bias(&mut z, self.bias.data());
        z
    }
}

/// Network features plus the fixed map from network output to noise
/// prediction: `ε̂ = skip + gain ⊙ F`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// `[B, input_dim]`.
    pub features: Tensor,
    /// `[B, CELLS]`, `a(t)·x_t`.
    pub skip: Tensor,
    /// `[B, CELLS]`, `b(t)` repeated along each row.
    pub gain: Tensor,
}

impl ModelInput {
    pub fn rows(&self) -> usize {
        self.features.rows()
    }
}

/// Three dense layers with SiLU between them: input → hidden → hidden → canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    config: ModelConfig,
    layers: Vec<Dense>,
}

/// Graph handles for every parameter of a model, in [`DenoiserModel::params`] order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
    trainable: Vec<Var>,
}

impl ParamVars {
    /// Wraps caller-owned handles, one per parameter in
    /// [`DenoiserModel::params`] order. All of them count as trainable.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self {
            trainable: vars.clone(),
            vars,
        }
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    /// Handles of the parameters an optimizer would update.
    pub fn trainable(&self) -> &[Var] {
        &self.trainable
    }
}

impl DenoiserModel {
    pub fn new(config: ModelConfig, rng: &mut StreamRng) -> Self {
        let h = config.hidden;
        let layers = vec![
            Dense::init(config.input_dim(), h, 2f64.sqrt(), rng),
            Dense::init(h, h, 2f64.sqrt(), rng),
            Dense::init(h, CELLS, 1.0, rng),
        ];
        Self { config, layers }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn has_adapters(&self) -> bool {
        self.layers.iter().any(|l| l.adapter.is_some())
    }

    /// Every parameter with its stable name.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("l{i}.weight"), &l.weight));
            out.push((format!("l{i}.bias"), &l.bias));
            if let Some(a) = &l.adapter {
                out.push((format!("l{i}.lora_down"), &a.down));
                out.push((format!("l{i}.lora_up"), &a.up));
            }
        }
        out
    }

    fn is_trainable(&self, name: &str) -> bool {
        !self.has_adapters() || name.contains(".lora_")
    }

    /// With adapters attached only adapter factors train; otherwise everything does.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor> {
        let adapted = self.has_adapters();
        let mut out = Vec::new();
        for l in &mut self.layers {
            match &mut l.adapter {
                Some(a) => {
                    out.push(&mut a.down);
                    out.push(&mut a.up);
                }
                None if !adapted => {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
                None => {}
            }
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|(n, _)| self.is_trainable(n))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Replaces named parameter tensors, e.g. after loading from disk.
    pub(crate) fn set_param(&mut self, name: &str, tensor: Tensor) -> Result<(), DiffusionError> {
        let (layer, field) = name
            .strip_prefix('l')
            .and_then(|r| r.split_once('.'))
            .ok_or_else(|| DiffusionError::UnknownParameter(name.to_string()))?;
        let idx: usize = layer
            .parse()
            .map_err(|_| DiffusionError::UnknownParameter(name.to_string()))?;
        let l = self
            .layers
            .get_mut(idx)
            .ok_or_else(|| DiffusionError::UnknownParameter(name.to_string()))?;
        let slot = match field {
            "weight" => &mut l.weight,
            "bias" => &mut l.bias,
            _ => return Err(DiffusionError::UnknownParameter(name.to_string())),
        };
        if slot.shape() != tensor.shape() {
            return Err(DiffusionError::ParamShape {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                got: tensor.shape().to_vec(),
            });
        }
        *slot = tensor;
        Ok(())
    }

    /// Wraps every dense layer in a low-rank adapter. Base weights are frozen
    /// from then on.
    pub fn apply_lowrank_adapter(&self, rank: usize, alpha: f64, rng: &mut StreamRng) -> Result<Self, DiffusionError> {
        let mut out = self.clone();
        for l in &mut out.layers {
            let (i, o) = (l.fan_in(), l.fan_out());
            if rank == 0 || rank > i.min(o) {
                return Err(DiffusionError::AdapterRank {
                    rank,
                    max: i.min(o),
                });
            }
            let std = 1.0 / (i as f64).sqrt();
            let down = rng.normals(i * rank).into_iter().map(|v| v * std).collect();
            l.adapter = Some(LowRankAdapter {
                rank,
                alpha,
                down: Tensor::new(vec![i, rank], down).expect("shape"),
                up: Tensor::zeros(vec![rank, o]),
            });
        }
        Ok(out)
    }

    /// Folds adapters into plain weights: `W ← W + scale · down · up`.
    pub fn merge_adapters(&self) -> Self {
        let mut out = self.clone();
        for l in &mut out.layers {
            if let Some(a) = l.adapter.take() {
                let delta = kernels::matmul(a.down.data(), a.up.data(), l.fan_in(), a.rank, l.fan_out());
                let s = a.scale();
                for (w, d) in l.weight.data_mut().iter_mut().zip(delta) {
                    *w += s * d;
                }
            }
        }
        out
    }

    /// Packs noisy canvases, contexts and timesteps into network features plus
    /// the per-row output map.
    pub fn build_input(
        &self,
        x_t: &[&[f64]],
        contexts: &[&Context],
        ts: &[usize],
        schedule: &NoiseSchedule,
    ) -> Result<ModelInput, DiffusionError> {
        let b = x_t.len();
        if contexts.len() != b || ts.len() != b {
            return Err(DiffusionError::ShapeMismatch {
                what: "build_input batch",
                expected: b,
                got: contexts.len().min(ts.len()),
            });
        }
        let steps = schedule.steps();
        let dim = self.config.input_dim();
        let mut data = Vec::with_capacity(b * dim);
        let mut skip = Vec::with_capacity(b * CELLS);
        let mut gain = Vec::with_capacity(b * CELLS);
        for ((x, c), t) in x_t.iter().zip(contexts).zip(ts) {
            if x.len() != CELLS {
                return Err(DiffusionError::ShapeMismatch {
                    what: "canvas",
                    expected: CELLS,
                    got: x.len(),
                });
            }
            if *t >= steps {
                return Err(DiffusionError::TimestepOutOfRange { t: *t, steps });
            }
            data.extend_from_slice(x);
            match &c.condition {
                Some(m) => data.extend(m.cells().iter().map(|on| if *on { 1.0 } else { 0.0 })),
                None => data.extend(std::iter::repeat(0.0).take(CELLS)),
            }
            data.extend_from_slice(&c.prompt.embed());
            data.extend(timestep_embedding(*t, steps, self.config.time_frequencies));
            let (a, g) = self.config.coefficients(schedule.alpha_bar(*t));
            skip.extend(x.iter().map(|v| a * v));
            gain.extend(std::iter::repeat(g).take(CELLS));
        }
        Ok(ModelInput {
            features: Tensor::new(vec![b, dim], data).expect("shape"),
            skip: Tensor::new(vec![b, CELLS], skip).expect("shape"),
            gain: Tensor::new(vec![b, CELLS], gain).expect("shape"),
        })
    }

    fn network(&self, features: &Tensor) -> Vec<f64> {
        let rows = features.rows();
        let mut h = features.data().to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(&h, rows);
            if i < last {
                kernels::silu_inplace(&mut h);
            }
        }
        h
    }

    /// Gradient-free noise prediction, `[B, CELLS]`.
    pub fn predict(&self, input: &ModelInput) -> Tensor {
        let f = self.network(&input.features);
        let eps = input
            .skip
            .data()
            .iter()
            .zip(f.iter().zip(input.gain.data()))
            .map(|(s, (fv, gv))| s + fv * gv)
            .collect();
        Tensor::new(vec![input.rows(), CELLS], eps).expect("shape")
    }

    /// Inserts parameters into `g`; only trainable ones track gradients.
    pub fn bind(&self, g: &mut Graph) -> ParamVars {
        let mut vars = Vec::new();
        let mut trainable = Vec::new();
        for (name, t) in self.params() {
            if self.is_trainable(&name) {
                let v = g.leaf(t.clone().with_requires_grad(true));
                trainable.push(v);
                vars.push(v);
            } else {
                vars.push(g.constant(t.clone()));
            }
        }
        ParamVars { vars, trainable }
    }

    /// Inserts every parameter as a constant (frozen reference copies).
    pub fn bind_frozen(&self, g: &mut Graph) -> ParamVars {
        let vars = self.params().into_iter().map(|(_, t)| g.constant(t.clone())).collect();
        ParamVars {
            vars,
            trainable: Vec::new(),
        }
    }

    /// Differentiable noise prediction; same arithmetic as [`predict`](Self::predict).
    pub fn forward(&self, g: &mut Graph, p: &ParamVars, input: &ModelInput) -> Var {
        let mut h = g.constant(input.features.clone());
        let mut k = 0;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let (w, b) = (p.vars[k], p.vars[k + 1]);
            k += 2;
            let mut z = g.matmul(h, w);
            if let Some(a) = &l.adapter {
                let (down, up) = (p.vars[k], p.vars[k + 1]);
                k += 2;
                let d = g.matmul(h, down);
                let u = g.matmul(d, up);
                let u = g.scale(u, a.scale());
                z = g.add(z, u);
            }
            z = g.add_row_bias(z, b);
            h = if i < last { g.silu(z) } else { z };
        }
        let gain = g.constant(input.gain.clone());
        let skip = g.constant(input.skip.clone());
        let scaled = g.mul(h, gain);
        g.add(skip, scaled)
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|(_, t)| t.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleConfig;
    use crate::numerics::RngStream;
    use crate::world::ShapeClass;

    fn small() -> DenoiserModel {
        DenoiserModel::new(
            ModelConfig {
                hidden: 16,
                ..ModelConfig::default()
            },
            &mut RngStream::new(1, 0).rng(),
        )
    }

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(&ScheduleConfig::default()).unwrap()
    }

    fn input(m: &DenoiserModel, rows: usize) -> ModelInput {
        let mut rng = RngStream::new(2, 0).rng();
        let xs: Vec<Vec<f64>> = (0..rows).map(|_| rng.normals(CELLS)).collect();
        let ctx = Context::unconditioned(PromptSpec::source(ShapeClass::Disc));
        let xr: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let cs: Vec<&Context> = (0..rows).map(|_| &ctx).collect();
        let ts: Vec<usize> = (0..rows).map(|i| i * 7 % 100).collect();
        m.build_input(&xr, &cs, &ts, &schedule()).unwrap()
    }

    #[test]
    fn input_layout() {
        let m = DenoiserModel::new(ModelConfig::default(), &mut RngStream::new(0, 0).rng());
        assert_eq!(m.config().input_dim(), 537);
        let x = input(&m, 3);
        assert_eq!(x.features.shape(), &[3, 537]);
        assert_eq!(m.predict(&x).shape(), &[3, CELLS]);
    }

    #[test]
    fn graph_and_plain_paths_agree_bitwise() {
        let m = small()
            .apply_lowrank_adapter(2, 4.0, &mut RngStream::new(3, 0).rng())
            .unwrap();
        let x = input(&m, 4);
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let out = m.forward(&mut g, &p, &x);
        assert!(g.value(out).bit_eq(&m.predict(&x)));
    }

    #[test]
    fn rows_do_not_interact() {
        let m = small();
        let x = input(&m, 5);
        let all = m.predict(&x);
        let row = |t: &Tensor| {
            let c = t.cols();
            Tensor::new(vec![1, c], t.data()[2 * c..3 * c].to_vec()).unwrap()
        };
        let single = m.predict(&ModelInput {
            features: row(&x.features),
            skip: row(&x.skip),
            gain: row(&x.gain),
        });
        assert_eq!(&all.data()[2 * CELLS..3 * CELLS], single.data());
    }

    #[test]
    fn output_kinds_recover_the_noise() {
        // With the network output set to its ideal target, every kind maps
        // back to the true ε.
        let (x0, eps, abar) = (0.7, -1.3, 0.4f64);
        let xt = abar.sqrt() * x0 + (1.0 - abar).sqrt() * eps;
        let sd = 0.4;
        let s2 = (1.0 - abar) / abar;
        let (c_skip, c_out) = (sd * sd / (s2 + sd * sd), s2.sqrt() * sd / (s2 + sd * sd).sqrt());
        for (kind, target) in [
            (OutputKind::Epsilon, eps),
            (OutputKind::Sample, x0),
            (OutputKind::Velocity, abar.sqrt() * eps - (1.0 - abar).sqrt() * x0),
            (OutputKind::Preconditioned, (x0 - c_skip * xt / abar.sqrt()) / c_out),
        ] {
            let (a, b) = kind.coefficients(abar, sd);
            assert!((a * xt + b * target - eps).abs() < 1e-12, "{kind:?}");
        }
    }

    #[test]
    fn adapter_counts_and_rank_checks() {
        let m = small();
        let a = m.apply_lowrank_adapter(3, 3.0, &mut RngStream::new(0, 1).rng()).unwrap();
        let dims = [(537usize, 16usize), (16, 16), (16, CELLS)];
        let want: usize = dims.iter().map(|(i, o)| 3 * (i + o)).sum();
        assert_eq!(a.trainable_count(), want);
        assert!(m.apply_lowrank_adapter(17, 1.0, &mut RngStream::new(0, 1).rng()).is_err());
        assert!(m.apply_lowrank_adapter(0, 1.0, &mut RngStream::new(0, 1).rng()).is_err());
    }

    #[test]
    fn hash_tracks_values() {
        let m = small();
        let mut n = m.clone();
        assert_eq!(m.content_hash(), n.content_hash());
        n.trainable_params_mut()[0].data_mut()[0] += 1e-12;
        assert_ne!(m.content_hash(), n.content_hash());
    }

    #[test]
    fn timestep_embedding_is_bounded() {
        let e = timestep_embedding(37, 100, 8);
        assert_eq!(e.len(), 16);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(timestep_embedding(0, 100, 2), vec![0.0, 1.0, 0.0, 1.0]);
    }
}
