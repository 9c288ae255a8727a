//! Contextual episodic environments.

mod point_mass;
mod synthetic;

pub use point_mass::{PointMass, PointMassContext, PointMassParams};
pub use synthetic::{synthetic_value, Synthetic, SyntheticParams, SYNTHETIC_PEAK};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub time_step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub terminated: bool,
    pub success: bool,
}

pub trait Environment: Send + Sync {
    fn name(&self) -> &'static str;
    fn context_dim(&self) -> usize;
    /// Length of [`Environment::observe`].
    fn observation_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    /// Bounds `(min, max)` on the reward of a single step.
    fn reward_bounds(&self) -> (f64, f64);
    fn reset(&self, context: &[f64], rng: &mut dyn RngCore) -> Result<EnvState>;
    fn step(&self, state: &EnvState, action: &[f64], context: &[f64]) -> StepOutcome;
    /// Normalized observation of `state`.
    fn observe(&self, state: &EnvState) -> Vec<f64>;
}

/// Arguments for building an environment from configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentConfig {
    pub kind: String,
    /// Remaining keys, interpreted by the selected environment.
    #[serde(flatten)]
    pub params: toml::Table,
}

pub type EnvironmentRegistry = Registry<dyn Environment, EnvironmentConfig>;

fn parse_params<T: serde::de::DeserializeOwned>(cfg: &EnvironmentConfig) -> Result<T> {
    toml::Value::Table(cfg.params.clone())
        .try_into()
        .map_err(|e| Error::Config(format!("[environment] for `{}`: {e}", cfg.kind)))
}

/// Registry with the built-in environments.
pub fn environment_registry() -> EnvironmentRegistry {
    let mut r = EnvironmentRegistry::new("environment");
    r.register("point_mass", |cfg| {
        let params: PointMassParams = parse_params(cfg)?;
        Ok(Box::new(PointMass::new(params)?))
    });
    r.register("synthetic", |cfg| {
        let params: SyntheticParams = parse_params(cfg)?;
        Ok(Box::new(Synthetic::new(params)?))
    });
    r
}
