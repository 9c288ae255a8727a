//! Episodic policy-gradient learner with a linear-Gaussian policy.
//!
//! The action mean is linear in degree-2 polynomial features of the
//! observation (and, optionally, of the context). Each episode's discounted
//! Monte Carlo return doubles as the per-context value estimate.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::stats::{ContextRollout, RolloutBatch, Transition};

/// Lower bound on the action noise standard deviation.
pub const MIN_ACTION_NOISE: f64 = 1e-3;

fn d_kind() -> String {
    "reinforce".into()
}
fn d_gamma() -> f64 {
    0.99
}
fn d_lr() -> f64 {
    0.05
}
fn d_one() -> usize {
    1
}
fn d_init_log_std() -> f64 {
    0.0
}
fn d_max_log_std() -> f64 {
    2.0
}
fn d_clip() -> f64 {
    1.0
}

/// Gradient ascent rule applied to the clipped gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    /// Adam with `beta = (0.9, 0.999)`.
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    #[serde(default = "d_kind")]
    pub kind: String,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    /// Gradient steps taken on each batch.
    #[serde(default = "d_one")]
    pub iterations_per_update: usize,
    /// Append the context to the policy input.
    #[serde(default)]
    pub context_visible: bool,
    #[serde(default = "d_init_log_std")]
    pub init_log_std: f64,
    #[serde(default = "d_max_log_std")]
    pub max_log_std: f64,
    /// Gradients are rescaled to at most this Euclidean norm.
    #[serde(default = "d_clip")]
    pub max_grad_norm: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        toml::Value::Table(Default::default()).try_into().expect("defaults are valid")
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0, 1), got {}", self.gamma)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.iterations_per_update == 0 {
            return Err(Error::Config("iterations_per_update must be >= 1".into()));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::Config("max_grad_norm must be > 0".into()));
        }
        if !(self.init_log_std >= MIN_ACTION_NOISE.ln() && self.init_log_std <= self.max_log_std) {
            return Err(Error::Config("init_log_std must lie in [ln 1e-3, max_log_std]".into()));
        }
        Ok(())
    }
}

/// `[1, x_i, x_i x_j (i <= j)]`.
pub fn polynomial_features(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut f = Vec::with_capacity(feature_count(n));
    f.push(1.0);
    f.extend_from_slice(x);
    for i in 0..n {
        for j in i..n {
            f.push(x[i] * x[j]);
        }
    }
    f
}

pub fn feature_count(input_dim: usize) -> usize {
    1 + input_dim + input_dim * (input_dim + 1) / 2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParameters {
    pub input_dim: usize,
    pub action_dim: usize,
    /// Row-major `action_dim x feature_count(input_dim)`.
    pub weights: Vec<f64>,
    pub log_action_noise: Vec<f64>,
}

impl PolicyParameters {
    pub fn zeros(input_dim: usize, action_dim: usize, log_std: f64) -> Self {
        Self {
            input_dim,
            action_dim,
            weights: vec![0.0; action_dim * feature_count(input_dim)],
            log_action_noise: vec![log_std; action_dim],
        }
    }

    pub fn n_features(&self) -> usize {
        feature_count(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        Error::check_dim(self.action_dim * self.n_features(), self.weights.len())?;
        Error::check_dim(self.action_dim, self.log_action_noise.len())?;
        if self.weights.iter().chain(&self.log_action_noise).any(|w| !w.is_finite()) {
            return Err(Error::InvalidParameter("policy parameters must be finite".into()));
        }
        if self.log_action_noise.iter().any(|l| *l < MIN_ACTION_NOISE.ln() - 1e-12) {
            return Err(Error::InvalidParameter("action noise below 1e-3".into()));
        }
        Ok(())
    }

    pub fn mean_action(&self, features: &[f64]) -> Vec<f64> {
        let nf = self.n_features();
        (0..self.action_dim)
            .map(|i| {
                self.weights[i * nf..(i + 1) * nf]
                    .iter()
                    .zip(features)
                    .map(|(w, f)| w * f)
                    .sum()
            })
            .collect()
    }

    /// `log pi(a | features)`.
    pub fn log_prob(&self, features: &[f64], action: &[f64]) -> f64 {
        let mean = self.mean_action(features);
        let mut lp = 0.0;
        for i in 0..self.action_dim {
            let ls = self.log_action_noise[i];
            let z = (action[i] - mean[i]) * (-ls).exp();
            lp += -0.5 * z * z - ls - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        lp
    }

    /// Flat view `[weights..., log_action_noise...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        v.extend_from_slice(&self.log_action_noise);
        v
    }

    pub fn from_flat(&self, flat: &[f64]) -> Self {
        let nw = self.weights.len();
        Self {
            weights: flat[..nw].to_vec(),
            log_action_noise: flat[nw..].to_vec(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImproveReport {
    pub steps_taken: usize,
    pub steps_skipped: usize,
    /// Norm of the last gradient before clipping.
    pub grad_norm: f64,
}

pub trait Learner: Send + Sync {
    fn name(&self) -> &'static str;
    fn parameters(&self) -> &PolicyParameters;
    fn set_parameters(&mut self, params: PolicyParameters) -> Result<()>;
    /// One episode in `context`; `deterministic` uses the mean action.
    fn rollout(
        &self,
        env: &dyn Environment,
        context: &[f64],
        rng: &mut dyn RngCore,
        deterministic: bool,
    ) -> Result<ContextRollout>;
    fn improve(&mut self, batch: &RolloutBatch) -> ImproveReport;
}

/// Arguments for building a learner.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerSetup {
    pub config: LearnerConfig,
    pub observation_dim: usize,
    pub context_dim: usize,
    pub action_dim: usize,
}

pub type LearnerRegistry = Registry<dyn Learner, LearnerSetup>;

pub fn learner_registry() -> LearnerRegistry {
    let mut r = LearnerRegistry::new("learner");
    r.register("reinforce", |s| Ok(Box::new(Reinforce::new(s)?)));
    r
}

/// REINFORCE with a standardized mean-return baseline.
pub struct Reinforce {
    config: LearnerConfig,
    policy: PolicyParameters,
    adam: AdamState,
}

#[derive(Clone, Debug, Default)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn direction(&mut self, grad: &[f64]) -> Vec<f64> {
        if self.m.len() != grad.len() {
            *self = Self {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
                t: 0,
            };
        }
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        grad.iter()
            .enumerate()
            .map(|(i, g)| {
                self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
                self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
                (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS)
            })
            .collect()
    }
}

impl Reinforce {
    pub fn new(setup: &LearnerSetup) -> Result<Self> {
        setup.config.validate()?;
        let input = setup.observation_dim + if setup.config.context_visible { setup.context_dim } else { 0 };
        Ok(Self {
            policy: PolicyParameters::zeros(input, setup.action_dim, setup.config.init_log_std),
            config: setup.config.clone(),
            adam: AdamState::default(),
        })
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    fn policy_input(&self, observation: Vec<f64>, context: &[f64]) -> Vec<f64> {
        let mut x = observation;
        if self.config.context_visible {
            x.extend_from_slice(context);
        }
        x
    }

    /// Standardized returns; all zero when the returns are (numerically) equal.
    pub fn advantages(batch: &RolloutBatch) -> Vec<f64> {
        let g = batch.values();
        let n = g.len() as f64;
        let mean = g.iter().sum::<f64>() / n;
        let sd = (g.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        if sd <= 1e-12 * (1.0 + mean.abs()) {
            return vec![0.0; g.len()];
        }
        g.iter().map(|x| (x - mean) / sd).collect()
    }

    /// `1/K sum_k A_k sum_t log pi(a_t | s_t)` with the advantages held fixed.
    pub fn surrogate(params: &PolicyParameters, batch: &RolloutBatch, advantages: &[f64]) -> f64 {
        let mut total = 0.0;
        for (r, a) in batch.rollouts().iter().zip(advantages) {
            let lp: f64 = r
                .trajectory
                .iter()
                .map(|t| params.log_prob(&polynomial_features(&t.observation), &t.action))
                .sum();
            total += a * lp;
        }
        total / batch.len() as f64
    }

    /// Likelihood-ratio gradient of [`Reinforce::surrogate`], flat layout.
    pub fn gradient(params: &PolicyParameters, batch: &RolloutBatch, advantages: &[f64]) -> Vec<f64> {
        let nf = params.n_features();
        let ad = params.action_dim;
        let mut grad = vec![0.0; ad * nf + ad];
        let inv_var: Vec<f64> = params.log_action_noise.iter().map(|l| (-2.0 * l).exp()).collect();
        for (r, adv) in batch.rollouts().iter().zip(advantages) {
            if *adv == 0.0 {
                continue;
            }
            for t in &r.trajectory {
                let phi = polynomial_features(&t.observation);
                let mean = params.mean_action(&phi);
                for i in 0..ad {
                    let diff = t.action[i] - mean[i];
                    let coef = adv * diff * inv_var[i];
                    for (g, f) in grad[i * nf..(i + 1) * nf].iter_mut().zip(&phi) {
                        *g += coef * f;
                    }
                    grad[ad * nf + i] += adv * (diff * diff * inv_var[i] - 1.0);
                }
            }
        }
        let k = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= k);
        grad
    }
}

impl Learner for Reinforce {
    fn name(&self) -> &'static str {
        "reinforce"
    }

    fn parameters(&self) -> &PolicyParameters {
        &self.policy
    }

    fn set_parameters(&mut self, params: PolicyParameters) -> Result<()> {
        params.validate()?;
        Error::check_dim(self.policy.input_dim, params.input_dim)?;
        Error::check_dim(self.policy.action_dim, params.action_dim)?;
        self.policy = params;
        self.adam = AdamState::default();
        Ok(())
    }

    fn rollout(
        &self,
        env: &dyn Environment,
        context: &[f64],
        rng: &mut dyn RngCore,
        deterministic: bool,
    ) -> Result<ContextRollout> {
        Error::check_dim(env.action_dim(), self.policy.action_dim)?;
        let mut state = env.reset(context, rng)?;
        let mut trajectory = Vec::with_capacity(env.horizon());
        let mut value = 0.0;
        let mut discount = 1.0;
        let mut success = false;
        for _ in 0..env.horizon() {
            let x = self.policy_input(env.observe(&state), context);
            let phi = polynomial_features(&x);
            let mut action = self.policy.mean_action(&phi);
            if !deterministic {
                for (a, ls) in action.iter_mut().zip(&self.policy.log_action_noise) {
                    let xi: f64 = StandardNormal.sample(rng);
                    *a += ls.exp() * xi;
                }
            }
            let out = env.step(&state, &action, context);
            value += discount * out.reward;
            discount *= self.config.gamma;
            trajectory.push(Transition {
                observation: x,
                action,
                reward: out.reward,
            });
            state = out.state;
            success = out.success;
            if out.terminated {
                break;
            }
        }
        Ok(ContextRollout {
            context: context.to_vec().into(),
            value_estimate: value,
            episode_length: trajectory.len(),
            success,
            trajectory,
        })
    }

    fn improve(&mut self, batch: &RolloutBatch) -> ImproveReport {
        let mut report = ImproveReport::default();
        if self.policy.action_dim == 0 {
            return report;
        }
        let adv = Self::advantages(batch);
        for _ in 0..self.config.iterations_per_update {
            let grad = Self::gradient(&self.policy, batch, &adv);
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            report.grad_norm = norm;
            if !norm.is_finite() {
                log::warn!("non-finite policy gradient; step skipped");
                report.steps_skipped += 1;
                continue;
            }
            if norm == 0.0 {
                // nothing to learn from; keep the optimizer state untouched
                continue;
            }
            let clipped: Vec<f64> = grad.iter().map(|g| g * (self.config.max_grad_norm / norm).min(1.0)).collect();
            let dir = match self.config.optimizer {
                Optimizer::Sgd => clipped,
                Optimizer::Adam => self.adam.direction(&clipped),
            };
            let mut flat = self.policy.to_flat();
            for (p, g) in flat.iter_mut().zip(&dir) {
                *p += self.config.learning_rate * g;
            }
            let mut next = self.policy.from_flat(&flat);
            for l in &mut next.log_action_noise {
                *l = l.clamp(MIN_ACTION_NOISE.ln(), self.config.max_log_std);
            }
            self.policy = next;
            report.steps_taken += 1;
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_counts() {
        assert_eq!(feature_count(4), 15);
        assert_eq!(feature_count(7), 36);
        assert_eq!(polynomial_features(&[2.0, 3.0]), vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn log_prob_of_standard_normal() {
        let p = PolicyParameters::zeros(1, 1, 0.0);
        let phi = polynomial_features(&[0.5]);
        let lp = p.log_prob(&phi, &[1.0]);
        assert!((lp - (-0.5 - 0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(LearnerConfig::default().validate().is_ok());
        let bad = LearnerConfig {
            gamma: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
