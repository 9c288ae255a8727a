use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::{curriculum_registry, CurriculumSetup};
use crate::env::{environment_registry, Environment, EnvironmentConfig};
use crate::error::{Error, Result};
use crate::gaussian::{ContextDistribution, TargetSpec};
use crate::learner::LearnerConfig;
use crate::oracle::ExactSolverSettings;
use crate::update::CurriculumConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub mu: Vec<f64>,
    /// Diagonal of the target covariance.
    pub sigma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub mu: Vec<f64>,
    /// Initial covariance scale, `Sigma_0 = diag(theta * sigma)`.
    pub theta: Vec<f64>,
}

fn d_episodes() -> usize {
    100
}

fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "d_episodes")]
    pub episodes: usize,
    /// Evaluate the mean action instead of sampling from the policy.
    #[serde(default = "d_true")]
    pub deterministic: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            episodes: d_episodes(),
            deterministic: true,
        }
    }
}

fn d_mode() -> String {
    "spgl".into()
}

fn d_seeds() -> Vec<u64> {
    vec![0]
}

fn d_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    /// Training iterations `N`.
    pub total_iterations: usize,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "d_output")]
    pub output: PathBuf,
    /// One of the registered curricula (`default`, `spgl`, `numerical`).
    #[serde(default = "d_mode")]
    pub curriculum_mode: String,
    /// Presets that need an environment this build does not ship carry the reason here.
    #[serde(default)]
    pub unrunnable: Option<String>,
    pub environment: EnvironmentConfig,
    pub target: TargetConfig,
    pub initial: InitialConfig,
    pub curriculum: CurriculumConfig,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub numerical: ExactSolverSettings,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn target_spec(&self) -> Result<TargetSpec> {
        TargetSpec::new(self.target.mu.clone(), self.target.sigma.clone())
            .map_err(|e| Error::Config(format!("[target]: {e}")))
    }

    pub fn initial_distribution(&self) -> Result<ContextDistribution> {
        ContextDistribution::new(self.initial.mu.clone(), self.initial.theta.clone(), self.target_spec()?)
            .map_err(|e| Error::Config(format!("[initial]: {e}")))
    }

    pub fn build_environment(&self) -> Result<Box<dyn Environment>> {
        environment_registry().create(&self.environment.kind, &self.environment)
    }

    pub fn curriculum_setup(&self) -> Result<CurriculumSetup> {
        Ok(CurriculumSetup {
            config: self.curriculum.clone(),
            initial: self.initial_distribution()?,
            exact: self.numerical.clone(),
        })
    }

    /// Full check of everything a run needs, including that the preset is runnable.
    pub fn validate(&self) -> Result<()> {
        if let Some(reason) = &self.unrunnable {
            return Err(Error::Config(format!("preset `{}` is not runnable: {reason}", self.name)));
        }
        if self.total_iterations == 0 {
            return Err(Error::Config("total_iterations must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.evaluation.episodes == 0 {
            return Err(Error::Config("evaluation.episodes must be >= 1".into()));
        }
        if !curriculum_registry().contains(&self.curriculum_mode) {
            return Err(Error::Config(format!(
                "unknown curriculum_mode `{}` (available: {})",
                self.curriculum_mode,
                curriculum_registry().names().join(", ")
            )));
        }
        self.curriculum.validate()?;
        self.learner.validate()?;
        let init = self.initial_distribution()?;
        let env = self.build_environment().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })?;
        if env.context_dim() != init.dim() {
            return Err(Error::Config(format!(
                "environment `{}` takes {}-dimensional contexts, target has {}",
                self.environment.kind,
                env.context_dim(),
                init.dim()
            )));
        }
        Ok(())
    }
}
