use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_factor() -> f64 {
    0.1
}

fn default_peak() -> f64 {
    0.4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LrSchedule {
    /// Multiply by `factor` at each milestone epoch; constant within epochs.
    Piecewise {
        milestones: Vec<usize>,
        #[serde(default = "default_factor")]
        factor: f64,
    },
    /// Triangle over all steps: linear rise from 0 to the base rate until
    /// `peak_fraction` of training, then linear fall to 0.
    Cyclic {
        #[serde(default = "default_peak")]
        peak_fraction: f64,
    },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Piecewise { milestones: Vec::new(), factor: default_factor() }
    }
}

impl LrSchedule {
    pub fn validate(&self, epochs: usize) -> Result<()> {
        match self {
            LrSchedule::Piecewise { milestones, factor } => {
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::validation("milestones must be strictly increasing"));
                }
                if milestones.last().is_some_and(|&m| m >= epochs) {
                    return Err(Error::validation(format!("milestones must be below the epoch count {epochs}")));
                }
                if !(*factor > 0.0 && factor.is_finite()) {
                    return Err(Error::validation("piecewise factor must be positive"));
                }
            }
            LrSchedule::Cyclic { peak_fraction } => {
                if !(*peak_fraction > 0.0 && *peak_fraction < 1.0) {
                    return Err(Error::validation("peak_fraction must lie in (0, 1)"));
                }
            }
        }
        Ok(())
    }

    /// Learning rate at `(epoch, batch)` for a run of `epochs × batches_per_epoch`
    /// steps.
    pub fn lr_at(&self, base: f64, epoch: usize, batch: usize, batches_per_epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Piecewise { milestones, factor } => milestones
                .iter()
                .filter(|&&m| epoch >= m)
                .fold(base, |lr, _| lr * factor),
            LrSchedule::Cyclic { peak_fraction } => {
                let total = (epochs * batches_per_epoch) as f64;
                let step = (epoch * batches_per_epoch + batch) as f64;
                let peak = peak_fraction * total;
                if step < peak {
                    base * step / peak
                } else {
                    base * (total - step) / (total - peak)
                }
            }
        }
    }
}
