//! One-step environment whose return is a known smooth function of the context.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{EnvState, Environment, StepOutcome};
use crate::error::{Error, Result};

pub const SYNTHETIC_PEAK: f64 = 10.0;

/// `A exp(-|c - center|^2 / (2 width^2))` with `A = 10`.
pub fn synthetic_value(context: &[f64], center: &[f64], width: f64) -> Result<f64> {
    Error::check_dim(center.len(), context.len())?;
    if width.is_infinite() {
        return Ok(SYNTHETIC_PEAK);
    }
    let d2: f64 = context.iter().zip(center).map(|(c, m)| (c - m).powi(2)).sum();
    Ok(SYNTHETIC_PEAK * (-d2 / (2.0 * width * width)).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    pub center: Vec<f64>,
    pub width: f64,
}

pub struct Synthetic {
    params: SyntheticParams,
}

impl Synthetic {
    pub fn new(params: SyntheticParams) -> Result<Self> {
        if params.center.is_empty() || !(params.width > 0.0) {
            return Err(Error::Config("synthetic: center must be nonempty and width > 0".into()));
        }
        Ok(Self {
            params,
        })
    }
}

impl Environment for Synthetic {
    fn name(&self) -> &'static str {
        "synthetic"
    }

    fn context_dim(&self) -> usize {
        self.params.center.len()
    }

    fn observation_dim(&self) -> usize {
        0
    }

    fn action_dim(&self) -> usize {
        0
    }

    fn horizon(&self) -> usize {
        1
    }

    fn reward_bounds(&self) -> (f64, f64) {
        (0.0, SYNTHETIC_PEAK)
    }

    fn reset(&self, context: &[f64], _rng: &mut dyn RngCore) -> Result<EnvState> {
        Error::check_dim(self.context_dim(), context.len())?;
        Ok(EnvState {
            position: [0.0; 2],
            velocity: [0.0; 2],
            time_step: 0,
        })
    }

    fn step(&self, state: &EnvState, _action: &[f64], context: &[f64]) -> StepOutcome {
        let value = synthetic_value(context, &self.params.center, self.params.width).unwrap_or(0.0);
        StepOutcome {
            state: EnvState {
                time_step: state.time_step + 1,
                ..state.clone()
            },
            reward: value,
            terminated: true,
            success: value >= 0.5 * SYNTHETIC_PEAK,
        }
    }

    fn observe(&self, _state: &EnvState) -> Vec<f64> {
        Vec::new()
    }
}
