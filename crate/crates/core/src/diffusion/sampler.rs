use super::{Context, DenoiserModel, DiffusionError, NoiseSchedule};
use crate::numerics::RngStream;
use crate::world::{Canvas, CELLS};

/// Rows per forward pass while sampling.
const CHUNK: usize = 64;

/// Ancestral DDPM sampling for one context.
pub fn sample(
    model: &DenoiserModel,
    context: &Context,
    schedule: &NoiseSchedule,
    stream: RngStream,
) -> Result<Canvas, DiffusionError> {
    Ok(sample_batch(model, &[(context, stream)], schedule)?.remove(0))
}

/// Samples many contexts at once. Each request owns its RNG stream, so the
/// result for a request does not depend on what else is in the batch.
pub fn sample_batch(
    model: &DenoiserModel,
    requests: &[(&Context, RngStream)],
    schedule: &NoiseSchedule,
) -> Result<Vec<Canvas>, DiffusionError> {
    let mut out = Vec::with_capacity(requests.len());
    for chunk in requests.chunks(CHUNK) {
        out.extend(sample_chunk(model, chunk, schedule)?);
    }
    Ok(out)
}

fn sample_chunk(
    model: &DenoiserModel,
    requests: &[(&Context, RngStream)],
    schedule: &NoiseSchedule,
) -> Result<Vec<Canvas>, DiffusionError> {
    let b = requests.len();
    let mut rngs: Vec<_> = requests.iter().map(|(_, s)| s.rng()).collect();
    let mut xs: Vec<Vec<f64>> = rngs.iter_mut().map(|r| r.normals(CELLS)).collect();
    let contexts: Vec<&Context> = requests.iter().map(|(c, _)| *c).collect();
    let steps = schedule.steps();
    for t in (0..steps).rev() {
        let views: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let input = model.build_input(&views, &contexts, &vec![t; b], schedule)?;
        let eps = model.predict(&input);
        let (beta, alpha, abar) = (schedule.beta(t), schedule.alpha(t), schedule.alpha_bar(t));
        let coef = beta / (1.0 - abar).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let sigma = schedule.posterior_variance(t).sqrt();
        for (i, x) in xs.iter_mut().enumerate() {
            let e = &eps.data()[i * CELLS..(i + 1) * CELLS];
            for (v, ev) in x.iter_mut().zip(e) {
                *v = (*v - coef * ev) * inv_sqrt_alpha;
            }
            if t > 0 {
                let z = rngs[i].normals(CELLS);
                for (v, zv) in x.iter_mut().zip(z) {
                    *v += sigma * zv;
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(DiffusionError::NonFinite { t });
            }
        }
    }
    Ok(xs
        .into_iter()
        .map(|x| Canvas::new(x.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()).expect("canvas size"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{ModelConfig, ScheduleConfig};
    use crate::numerics::Tensor;
    use crate::world::{PromptSpec, ShapeClass};

    fn setup() -> (DenoiserModel, NoiseSchedule, Context) {
        let m = DenoiserModel::new(
            ModelConfig {
                hidden: 32,
                ..ModelConfig::default()
            },
            &mut RngStream::new(4, 0).rng(),
        );
        let s = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
        (m, s, Context::unconditioned(PromptSpec::source(ShapeClass::Square)))
    }

    #[test]
    fn rerun_is_byte_identical() {
        let (m, s, c) = setup();
        let a = sample(&m, &c, &s, RngStream::new(9, 1)).unwrap();
        let b = sample(&m, &c, &s, RngStream::new(9, 1)).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn batching_does_not_change_samples() {
        let (m, s, c) = setup();
        let reqs: Vec<(&Context, RngStream)> = (0..5).map(|i| (&c, RngStream::new(9, i))).collect();
        let batch = sample_batch(&m, &reqs, &s).unwrap();
        for (i, got) in batch.iter().enumerate() {
            let alone = sample(&m, &c, &s, RngStream::new(9, i as u64)).unwrap();
            assert!(got.bit_eq(&alone));
        }
    }

    #[test]
    fn nan_parameters_report_timestep() {
        let (mut m, s, c) = setup();
        let w = m.trainable_params_mut().remove(0);
        let mut data = w.data().to_vec();
        data[0] = f64::NAN;
        *w = Tensor::new(w.shape().to_vec(), data).unwrap();
        match sample(&m, &c, &s, RngStream::new(0, 0)) {
            Err(DiffusionError::NonFinite { t }) => assert_eq!(t, 99),
            other => panic!("{other:?}"),
        }
    }
}
