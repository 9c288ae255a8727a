//! Curriculum strategies: how the training-context distribution evolves.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gaussian::ContextDistribution;
use crate::oracle::{dispatch_mode, solve_exact_sampled, ExactSolverSettings, SolveMode};
use crate::registry::Registry;
use crate::stats::{standardize, RolloutBatch};
use crate::update::{update, CurriculumConfig};

/// Summary of one curriculum update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumStep {
    pub step_kind: String,
    pub active_case: String,
    /// `KL(new || old)`.
    pub kl_step: f64,
    /// Mean-block part of `kl_step`.
    pub kl_step_mean: f64,
    pub degenerate: bool,
    /// Largest KKT residual of a closed-form step (0 when not applicable).
    pub kkt_max: f64,
    /// Set when the update fell back to a degraded result.
    pub warning: Option<String>,
}

impl CurriculumStep {
    fn unchanged(kind: &str) -> Self {
        Self {
            step_kind: kind.into(),
            active_case: "none".into(),
            kl_step: 0.0,
            kl_step_mean: 0.0,
            degenerate: false,
            kkt_max: 0.0,
            warning: None,
        }
    }
}

pub trait Curriculum: Send + Sync {
    fn name(&self) -> &'static str;
    /// Distribution training contexts are currently drawn from.
    fn distribution(&self) -> &ContextDistribution;
    /// Move the distribution using a batch collected from [`Curriculum::distribution`].
    fn update(&mut self, batch: &RolloutBatch) -> Result<CurriculumStep>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumSetup {
    pub config: CurriculumConfig,
    pub initial: ContextDistribution,
    pub exact: ExactSolverSettings,
}

pub type CurriculumRegistry = Registry<dyn Curriculum, CurriculumSetup>;

pub fn curriculum_registry() -> CurriculumRegistry {
    let mut r = CurriculumRegistry::new("curriculum");
    r.register("default", |s| Ok(Box::new(DefaultCurriculum::new(s))));
    r.register("spgl", |s| Ok(Box::new(SelfPaced::new(s)?)));
    r.register("numerical", |s| Ok(Box::new(NumericalSelfPaced::new(s)?)));
    r
}

/// Always samples from the target.
pub struct DefaultCurriculum {
    dist: ContextDistribution,
}

impl DefaultCurriculum {
    pub fn new(setup: &CurriculumSetup) -> Self {
        Self {
            dist: setup.initial.target().as_distribution(),
        }
    }
}

impl Curriculum for DefaultCurriculum {
    fn name(&self) -> &'static str {
        "default"
    }

    fn distribution(&self) -> &ContextDistribution {
        &self.dist
    }

    fn update(&mut self, _batch: &RolloutBatch) -> Result<CurriculumStep> {
        Ok(CurriculumStep::unchanged("none"))
    }
}

/// Closed-form trust-region updates.
pub struct SelfPaced {
    config: CurriculumConfig,
    dist: ContextDistribution,
}

impl SelfPaced {
    pub fn new(setup: &CurriculumSetup) -> Result<Self> {
        setup.config.validate()?;
        Ok(Self {
            config: setup.config.clone(),
            dist: setup.initial.clone(),
        })
    }
}

impl Curriculum for SelfPaced {
    fn name(&self) -> &'static str {
        "spgl"
    }

    fn distribution(&self) -> &ContextDistribution {
        &self.dist
    }

    fn update(&mut self, batch: &RolloutBatch) -> Result<CurriculumStep> {
        let (next, report) = update(&self.dist, batch, &self.config)?;
        let step = CurriculumStep {
            step_kind: report.step_label(),
            active_case: report.case_label(),
            kl_step: report.kl_step,
            kl_step_mean: next.kl_mean_part(&self.dist)?,
            degenerate: report.degenerate,
            kkt_max: report.kkt_max(),
            warning: report.degenerate.then(|| "degenerate batch; distribution unchanged".to_string()),
        };
        self.dist = next;
        Ok(step)
    }
}

/// Multi-start solution of the exact sampled subproblem at every update.
pub struct NumericalSelfPaced {
    config: CurriculumConfig,
    settings: ExactSolverSettings,
    dist: ContextDistribution,
    updates: u64,
}

impl NumericalSelfPaced {
    pub fn new(setup: &CurriculumSetup) -> Result<Self> {
        setup.config.validate()?;
        Ok(Self {
            config: setup.config.clone(),
            settings: setup.exact.clone(),
            dist: setup.initial.clone(),
            updates: 0,
        })
    }
}

impl Curriculum for NumericalSelfPaced {
    fn name(&self) -> &'static str {
        "numerical"
    }

    fn distribution(&self) -> &ContextDistribution {
        &self.dist
    }

    fn update(&mut self, batch: &RolloutBatch) -> Result<CurriculumStep> {
        let mut cfg = self.config.clone();
        let standardized;
        let batch = if cfg.standardize_values {
            let (z, v_lower) = standardize(&batch.values(), cfg.v_lower);
            cfg.v_lower = v_lower;
            let contexts = batch.rollouts().iter().map(|r| r.context.clone()).collect();
            standardized = RolloutBatch::from_values(contexts, &z, batch.source().clone())?;
            &standardized
        } else {
            batch
        };
        let mode = dispatch_mode(batch, &self.dist, &cfg)?;
        let settings = ExactSolverSettings {
            seed: self.settings.seed.wrapping_add(self.updates),
            ..self.settings.clone()
        };
        self.updates += 1;
        let sol = solve_exact_sampled(batch, &self.dist, &cfg, mode, &settings)?;
        let warning = (!sol.converged).then(|| {
            log::warn!("exact curriculum solver hit its iteration budget; using best feasible iterate");
            "exact solver did not converge".to_string()
        });
        let step = CurriculumStep {
            step_kind: match mode {
                SolveMode::Performance => "performance".into(),
                SolveMode::Convergence => "convergence".into(),
            },
            active_case: "numerical".into(),
            kl_step: sol.kl_step,
            kl_step_mean: sol.dist.kl_mean_part(&self.dist)?,
            degenerate: false,
            kkt_max: 0.0,
            warning,
        };
        self.dist = sol.dist;
        Ok(step)
    }
}
