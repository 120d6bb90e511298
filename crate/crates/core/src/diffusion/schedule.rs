use serde::{Deserialize, Serialize};

use super::DiffusionError;

/// Linear-β DDPM schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        // β_end chosen so that ᾱ runs from ≈1 down to ≈0.13 over 100 steps.
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.04,
        }
    }
}

/// Per-timestep coefficients β_t, α_t = 1 − β_t and ᾱ_t = ∏_{s≤t} α_s.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(cfg: &ScheduleConfig) -> Result<Self, DiffusionError> {
        if cfg.steps < 2 {
            return Err(DiffusionError::InvalidSchedule(format!(
                "need at least 2 steps, got {}",
                cfg.steps
            )));
        }
        let n = cfg.steps;
        let beta: Vec<f64> = (0..n)
            .map(|t| cfg.beta_start + (cfg.beta_end - cfg.beta_start) * t as f64 / (n - 1) as f64)
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self, DiffusionError> {
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(DiffusionError::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Variance of the ancestral step into `t − 1` (posterior β̃_t).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.beta[t] * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t])
        }
    }
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε`.
pub fn forward_noise_with(x0: &[f64], eps: &[f64], alpha_bar: f64) -> Result<Vec<f64>, DiffusionError> {
    if x0.len() != eps.len() {
        return Err(DiffusionError::ShapeMismatch {
            what: "forward_noise",
            expected: x0.len(),
            got: eps.len(),
        });
    }
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

pub fn forward_noise(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    if t >= schedule.steps() {
        return Err(DiffusionError::TimestepOutOfRange {
            t,
            steps: schedule.steps(),
        });
    }
    forward_noise_with(x0, eps, schedule.alpha_bar(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn default_schedule_invariants() {
        let s = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.steps(), 100);
        assert!(s.alpha_bar(0) <= 1.0);
        assert!(s.alpha_bar(99) > 0.0);
        for t in 1..100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        }
        assert!(s.alpha_bar(0) > 0.999);
        assert!((0.1..0.16).contains(&s.alpha_bar(99)), "{}", s.alpha_bar(99));
    }

    #[test]
    fn endpoints() {
        let x0 = vec![0.3, -0.7, 1.0];
        let eps = vec![1.0, 2.0, -1.0];
        assert_eq!(forward_noise_with(&x0, &eps, 1.0).unwrap(), x0);
        assert_eq!(forward_noise_with(&x0, &eps, 0.0).unwrap(), eps);
        let mid = forward_noise_with(&[0.0; 4], &[1.0; 4], 0.25).unwrap();
        for v in mid {
            assert!((v - 0.75f64.sqrt()).abs() < 1e-15);
            assert!((v - 0.8660).abs() < 1e-4);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(forward_noise_with(&[0.0; 3], &[0.0; 2], 0.5).is_err());
        let s = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
        assert!(forward_noise(&[0.0], 100, &[0.0], &s).is_err());
    }

    #[test]
    fn variance_contract() {
        let s = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
        let mut rng = RngStream::new(42, 0).rng();
        let n = 10_000;
        for t in [0usize, 30, 99] {
            let x0 = rng.normals(n);
            let eps = rng.normals(n);
            let xt = forward_noise(&x0, t, &eps, &s).unwrap();
            let mean = xt.iter().sum::<f64>() / n as f64;
            let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let want = s.alpha_bar(t) + (1.0 - s.alpha_bar(t));
            assert!((var - want).abs() / want < 0.05, "t={t} var={var}");
        }
        // Non-unit data variance exposes the ᾱ weighting.
        let x0: Vec<f64> = rng.normals(n).into_iter().map(|v| 2.0 * v).collect();
        let eps = rng.normals(n);
        let t = 60;
        let xt = forward_noise(&x0, t, &eps, &s).unwrap();
        let var = xt.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let want = s.alpha_bar(t) * 4.0 + (1.0 - s.alpha_bar(t));
        assert!((var - want).abs() / want < 0.05);
    }
}
