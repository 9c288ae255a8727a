//! Gaussian context distributions with scaled target covariance.
//!
//! A sampling distribution is `N(mu, Theta^{1/2} Sigma_t Theta^{1/2})` where
//! `Sigma_t` is the (diagonal) target covariance and `Theta = diag(theta)`.
//! With both matrices diagonal the covariance is simply `theta_j * sigma_t_j`,
//! and the distribution coincides with the target at `mu = mu_t, theta = 1`.

use std::f64::consts::PI;
use std::ops::Deref;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hard floor on every entry of `theta`; distributions below it are rejected.
pub const THETA_FLOOR: f64 = 1e-6;

/// Importance ratios are clamped to this band before use.
pub const RATIO_CLAMP: (f64, f64) = (1e-30, 1e30);

/// Target context distribution `psi(c) = N(mu_tilde, diag(sigma_tilde_diag))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    mu_tilde: Vec<f64>,
    sigma_tilde_diag: Vec<f64>,
}

impl TargetSpec {
    pub fn new(mu_tilde: Vec<f64>, sigma_tilde_diag: Vec<f64>) -> Result<Self> {
        if mu_tilde.is_empty() {
            return Err(Error::InvalidParameter("context dimension must be >= 1".into()));
        }
        Error::check_dim(mu_tilde.len(), sigma_tilde_diag.len())?;
        if mu_tilde.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidParameter("target mean must be finite".into()));
        }
        if sigma_tilde_diag.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidParameter(
                "target variances must be finite and strictly positive".into(),
            ));
        }
        Ok(Self {
            mu_tilde,
            sigma_tilde_diag,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu_tilde.len()
    }

    pub fn mu_tilde(&self) -> &[f64] {
        &self.mu_tilde
    }

    pub fn sigma_tilde_diag(&self) -> &[f64] {
        &self.sigma_tilde_diag
    }

    /// The target itself as a sampling distribution (`mu = mu_tilde`, `theta = 1`).
    pub fn as_distribution(&self) -> ContextDistribution {
        ContextDistribution {
            mu: self.mu_tilde.clone(),
            theta: vec![1.0; self.dim()],
            target: self.clone(),
        }
    }
}

/// A single context value `c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextSample(pub Vec<f64>);

impl Deref for ContextSample {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ContextSample {
    fn from(c: Vec<f64>) -> Self {
        ContextSample(c)
    }
}

/// Sampling distribution `p_nu(c)` with `nu = [mu, theta]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextDistribution {
    mu: Vec<f64>,
    theta: Vec<f64>,
    target: TargetSpec,
}

impl ContextDistribution {
    pub fn new(mu: Vec<f64>, theta: Vec<f64>, target: TargetSpec) -> Result<Self> {
        Error::check_dim(target.dim(), mu.len())?;
        Error::check_dim(target.dim(), theta.len())?;
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidParameter(format!("mean must be finite: {mu:?}")));
        }
        if let Some(t) = theta.iter().find(|t| !(t.is_finite() && **t >= THETA_FLOOR)) {
            return Err(Error::InvalidParameter(format!(
                "theta entry {t} is below the floor {THETA_FLOOR:e} or not finite"
            )));
        }
        Ok(Self { mu, theta, target })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn target(&self) -> &TargetSpec {
        &self.target
    }

    /// Diagonal of `Sigma = Theta^{1/2} Sigma_t Theta^{1/2}`.
    pub fn covariance(&self) -> Vec<f64> {
        self.theta
            .iter()
            .zip(self.target.sigma_tilde_diag())
            .map(|(t, s)| t * s)
            .collect()
    }

    /// Diagonal of `Sigma^{-1}`.
    pub fn precision(&self) -> Vec<f64> {
        self.covariance().iter().map(|v| 1.0 / v).collect()
    }

    pub fn with_mu(&self, mu: Vec<f64>) -> Result<Self> {
        Self::new(mu, self.theta.clone(), self.target.clone())
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::new(self.mu.clone(), theta, self.target.clone())
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        Error::check_dim(self.dim(), other.dim())?;
        if self.target != other.target {
            return Err(Error::InvalidParameter(
                "distributions are parameterized against different targets".into(),
            ));
        }
        Ok(())
    }

    /// Draw `k` independent contexts.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, k: usize) -> Vec<ContextSample> {
        let std: Vec<f64> = self.covariance().iter().map(|v| v.sqrt()).collect();
        (0..k)
            .map(|_| {
                let c = self
                    .mu
                    .iter()
                    .zip(&std)
                    .map(|(m, s)| {
                        let z: f64 = rng.sample(StandardNormal);
                        m + s * z
                    })
                    .collect();
                ContextSample(c)
            })
            .collect()
    }

    pub fn log_density(&self, c: &[f64]) -> Result<f64> {
        Error::check_dim(self.dim(), c.len())?;
        let mut quad = 0.0;
        let mut log_det = 0.0;
        for ((ci, mi), var) in c.iter().zip(&self.mu).zip(self.covariance()) {
            quad += (ci - mi).powi(2) / var;
            log_det += var.ln();
        }
        Ok(-0.5 * (self.dim() as f64 * (2.0 * PI).ln() + log_det + quad))
    }

    /// `ln p_self(c) - ln p_old(c)`, unclamped.
    pub fn log_importance_ratio(&self, old: &Self, c: &[f64]) -> Result<f64> {
        self.check_compatible(old)?;
        Ok(self.log_density(c)? - old.log_density(c)?)
    }

    /// `p_self(c) / p_old(c)`, clamped to [`RATIO_CLAMP`].
    pub fn importance_ratio(&self, old: &Self, c: &[f64]) -> Result<f64> {
        let lr = self.log_importance_ratio(old, c)?;
        Ok(lr.exp().clamp(RATIO_CLAMP.0, RATIO_CLAMP.1))
    }

    /// `KL(psi || p_self)`.
    pub fn kl_to_target(&self) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.dim() {
            let m = (self.mu[j] - self.target.mu_tilde[j]).powi(2) / self.target.sigma_tilde_diag[j];
            let t = self.theta[j];
            acc += (m + 1.0) / t + t.ln() - 1.0;
        }
        (0.5 * acc).max(0.0)
    }

    /// `KL(p_self || p_old)`.
    pub fn kl_between(&self, old: &Self) -> Result<f64> {
        Ok(self.kl_mean_part(old)? + self.kl_scale_part(old)?)
    }

    /// Mean-shift term of `KL(p_self || p_old)`: `1/2 ||mu - mu_old||^2_{Sigma_old^{-1}}`.
    pub fn kl_mean_part(&self, old: &Self) -> Result<f64> {
        self.check_compatible(old)?;
        Ok(0.5
            * self
                .mu
                .iter()
                .zip(&old.mu)
                .zip(old.covariance())
                .map(|((a, b), v)| (a - b).powi(2) / v)
                .sum::<f64>())
    }

    /// Covariance term of `KL(p_self || p_old)`; depends on `theta` only.
    pub fn kl_scale_part(&self, old: &Self) -> Result<f64> {
        self.check_compatible(old)?;
        Ok(theta_kl(&self.theta, &old.theta))
    }
}

/// `1/2 sum_j (r_j - 1 - ln r_j)` with `r = theta_new / theta_old`.
pub(crate) fn theta_kl(theta_new: &[f64], theta_old: &[f64]) -> f64 {
    0.5 * theta_new
        .iter()
        .zip(theta_old)
        .map(|(n, o)| {
            let x = n / o - 1.0;
            (x - x.ln_1p()).max(0.0)
        })
        .sum::<f64>()
}
