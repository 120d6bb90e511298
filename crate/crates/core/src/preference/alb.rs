use serde::{Deserialize, Serialize};

use super::PreferenceError;

/// Below this total loss both objectives count as satisfied.
const DEGENERATE_SUM: f64 = 1e-12;

/// How the text/condition weights are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AlbMode {
    /// From the current batch's mean losses.
    InstanceMean,
    /// From exponential moving averages of the batch mean losses.
    HistoricalMean { decay: f64 },
    /// Constant weights `(w_text, 1 − w_text)`.
    Fixed { w_text: f64 },
}

impl Default for AlbMode {
    fn default() -> Self {
        AlbMode::InstanceMean
    }
}

/// `(l_text / (l_text + l_cond), l_cond / (l_text + l_cond))`, or an even
/// split when both losses vanish.
pub fn alb_weights(l_text: f64, l_cond: f64) -> (f64, f64) {
    let sum = l_text + l_cond;
    if sum < DEGENERATE_SUM {
        log::warn!("loss balancing: l_text + l_cond = {sum:e}; using (0.5, 0.5)");
        return (0.5, 0.5);
    }
    let w = l_text / sum;
    (w, 1.0 - w)
}

/// Balancing mode plus the moving averages the historical mode needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlbState {
    pub mode: AlbMode,
    pub ema: Option<(f64, f64)>,
}

impl AlbState {
    pub fn new(mode: AlbMode) -> Result<Self, PreferenceError> {
        match mode {
            AlbMode::Fixed { w_text } if !(0.0..=1.0).contains(&w_text) => {
                return Err(PreferenceError::InvalidWeight(w_text));
            }
            AlbMode::HistoricalMean { decay } if !(0.0..1.0).contains(&decay) => {
                return Err(PreferenceError::InvalidWeight(decay));
            }
            _ => {}
        }
        Ok(Self { mode, ema: None })
    }

    /// Folds this batch's losses into the history and returns the weights
    /// for modes that do not depend on the graph. `None` means the weights
    /// come from the current batch.
    pub fn observe(&mut self, l_text: f64, l_cond: f64) -> Option<(f64, f64)> {
        match self.mode {
            AlbMode::InstanceMean => None,
            AlbMode::Fixed { w_text } => Some((w_text, 1.0 - w_text)),
            AlbMode::HistoricalMean { decay } => {
                let (et, ec) = match self.ema {
                    None => (l_text, l_cond),
                    Some((et, ec)) => (decay * et + (1.0 - decay) * l_text, decay * ec + (1.0 - decay) * l_cond),
                };
                self.ema = Some((et, ec));
                Some(alb_weights(et, ec))
            }
        }
    }
}
