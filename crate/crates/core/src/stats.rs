//! Rollout batches and the batch statistics that linearize both curriculum
//! subproblems around the current sampling distribution.
//!
//! With `Sigma = diag(theta * sigma_t)` the statistics are
//!
//! ```text
//! v_bar   = 1/K sum_k V_k
//! u_bar   = 1/K sum_k V_k (c_k - mu)
//! psi_bar = 1/2K sum_k V_k ((c_k - mu)^2 / (sigma_t theta^2) - 1 / theta)
//! H       = diag(1 / theta^2)
//! omega   = 1/2 (1/theta - 1/theta^2 - (mu_t - mu)^2 / (sigma_t theta^2))
//! ```
//!
//! `Sigma^{-1} u_bar` and `psi_bar` are the gradients of the importance-weighted
//! batch value with respect to `mu` and `theta`, `omega` is the gradient of
//! `KL(psi || p)` with respect to `theta`, and `1/4 ||d||^2_H` is the second-order
//! expansion of the covariance part of the trust-region KL.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{ContextDistribution, ContextSample, TargetSpec};

/// One recorded step of an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub observation: Vec<f64>,
    /// Raw (unclipped) action drawn from the policy.
    pub action: Vec<f64>,
    pub reward: f64,
}

/// A single context together with the episode played in it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextRollout {
    pub context: ContextSample,
    /// Discounted Monte Carlo return from the initial state.
    pub value_estimate: f64,
    pub episode_length: usize,
    pub success: bool,
    pub trajectory: Vec<Transition>,
}

/// `K` rollouts together with a snapshot of the distribution that produced the contexts.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    rollouts: Vec<ContextRollout>,
    source: ContextDistribution,
}

impl RolloutBatch {
    pub const MIN_ROLLOUTS: usize = 2;

    pub fn new(rollouts: Vec<ContextRollout>, source: ContextDistribution) -> Result<Self> {
        if rollouts.len() < Self::MIN_ROLLOUTS {
            return Err(Error::BatchTooSmall {
                min: Self::MIN_ROLLOUTS,
                found: rollouts.len(),
            });
        }
        for r in &rollouts {
            Error::check_dim(source.dim(), r.context.len())?;
            if !r.value_estimate.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "non-finite value estimate {}",
                    r.value_estimate
                )));
            }
        }
        Ok(Self { rollouts, source })
    }

    /// Build a batch from bare `(context, value)` pairs.
    pub fn from_values(
        contexts: Vec<ContextSample>,
        values: &[f64],
        source: ContextDistribution,
    ) -> Result<Self> {
        Error::check_dim(contexts.len(), values.len())?;
        let rollouts = contexts
            .into_iter()
            .zip(values)
            .map(|(context, &value_estimate)| ContextRollout {
                context,
                value_estimate,
                episode_length: 0,
                success: false,
                trajectory: Vec::new(),
            })
            .collect();
        Self::new(rollouts, source)
    }

    pub fn rollouts(&self) -> &[ContextRollout] {
        &self.rollouts
    }

    pub fn source(&self) -> &ContextDistribution {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.value_estimate).collect()
    }

    pub fn mean_value(&self) -> f64 {
        self.values().iter().sum::<f64>() / self.len() as f64
    }

    /// Percentage of successful episodes.
    pub fn success_rate(&self) -> f64 {
        100.0 * self.rollouts.iter().filter(|r| r.success).count() as f64 / self.len() as f64
    }

    /// Importance-weighted batch value `1/K sum_k p_cand(c_k)/p_src(c_k) V_k`
    /// of a candidate distribution (the exact sampled objective).
    pub fn weighted_value(&self, candidate: &ContextDistribution) -> Result<f64> {
        let mut acc = 0.0;
        for r in &self.rollouts {
            acc += candidate.importance_ratio(&self.source, &r.context)? * r.value_estimate;
        }
        Ok(acc / self.len() as f64)
    }
}

/// Value-dependent statistics of a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueStats {
    pub u_bar: Vec<f64>,
    pub v_bar: f64,
    pub psi_bar: Vec<f64>,
}

/// All linearization coefficients for one curriculum update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumStats {
    pub u_bar: Vec<f64>,
    pub v_bar: f64,
    pub psi_bar: Vec<f64>,
    /// Diagonal of `H`.
    pub h_diag: Vec<f64>,
    pub omega: Vec<f64>,
}

impl CurriculumStats {
    pub fn from_parts(value: ValueStats, h_diag: Vec<f64>, omega: Vec<f64>) -> Self {
        Self {
            u_bar: value.u_bar,
            v_bar: value.v_bar,
            psi_bar: value.psi_bar,
            h_diag,
            omega,
        }
    }

    pub fn dim(&self) -> usize {
        self.u_bar.len()
    }

    /// Scale all value-dependent statistics by `s`.
    pub fn scale_values(&self, s: f64) -> Self {
        Self {
            u_bar: self.u_bar.iter().map(|x| x * s).collect(),
            v_bar: self.v_bar * s,
            psi_bar: self.psi_bar.iter().map(|x| x * s).collect(),
            h_diag: self.h_diag.clone(),
            omega: self.omega.clone(),
        }
    }
}

/// `u_bar`, `v_bar`, `psi_bar` for a batch generated by `dist`.
pub fn compute_value_stats(batch: &RolloutBatch, dist: &ContextDistribution) -> Result<ValueStats> {
    if batch.source() != dist {
        return Err(Error::DistributionMismatch);
    }
    let values = batch.values();
    weighted_value_stats(batch, dist, &values)
}

/// Statistics of the batch re-centred at another distribution `center`, with the
/// values importance-weighted by `p_center / p_source`. Equals
/// [`compute_value_stats`] when `center` is the source distribution.
pub fn reweighted_value_stats(batch: &RolloutBatch, center: &ContextDistribution) -> Result<ValueStats> {
    let mut values = Vec::with_capacity(batch.len());
    for r in batch.rollouts() {
        values.push(center.importance_ratio(batch.source(), &r.context)? * r.value_estimate);
    }
    weighted_value_stats(batch, center, &values)
}

pub(crate) fn weighted_value_stats(
    batch: &RolloutBatch,
    dist: &ContextDistribution,
    values: &[f64],
) -> Result<ValueStats> {
    let d = dist.dim();
    let k = batch.len() as f64;
    let sigma = dist.target().sigma_tilde_diag();
    let theta = dist.theta();
    let mu = dist.mu();

    let mut u_bar = vec![0.0; d];
    let mut psi_bar = vec![0.0; d];
    let mut v_bar = 0.0;
    // fixed summation order: batch order, then dimension order
    for (r, v) in batch.rollouts().iter().zip(values) {
        Error::check_dim(d, r.context.len())?;
        v_bar += v;
        for j in 0..d {
            let diff = r.context[j] - mu[j];
            u_bar[j] += v * diff;
            psi_bar[j] += v * (diff * diff / (sigma[j] * theta[j] * theta[j]) - 1.0 / theta[j]);
        }
    }
    for j in 0..d {
        u_bar[j] /= k;
        psi_bar[j] /= 2.0 * k;
    }
    Ok(ValueStats {
        u_bar,
        v_bar: v_bar / k,
        psi_bar,
    })
}

/// `(diag(H), omega)` at `dist`.
pub fn compute_geometry_stats(dist: &ContextDistribution, target: &TargetSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    if dist.target() != target {
        return Err(Error::InvalidParameter(
            "distribution is parameterized against a different target".into(),
        ));
    }
    let h = dist.theta().iter().map(|t| 1.0 / (t * t)).collect();
    Ok((h, kl_theta_gradient(dist.mu(), dist.theta(), target)))
}

/// Gradient of `KL(psi || N(mu, diag(theta * sigma_t)))` with respect to `theta`.
pub fn kl_theta_gradient(mu: &[f64], theta: &[f64], target: &TargetSpec) -> Vec<f64> {
    let mu_t = target.mu_tilde();
    let sigma = target.sigma_tilde_diag();
    (0..theta.len())
        .map(|j| {
            let t = theta[j];
            let m = (mu_t[j] - mu[j]).powi(2) / sigma[j];
            0.5 * (1.0 / t - (1.0 + m) / (t * t))
        })
        .collect()
}

/// Maps raw returns to zero-mean, unit-variance scores; `v_lower` goes through
/// the same affine map so the performance condition is unchanged.
pub fn standardize(values: &[f64], v_lower: f64) -> (Vec<f64>, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-12 {
        return (values.iter().map(|v| v - mean).collect(), v_lower - mean);
    }
    (
        values.iter().map(|v| (v - mean) / sd).collect(),
        (v_lower - mean) / sd,
    )
}

/// Full statistics for the batch at its generating distribution.
pub fn compute_stats(batch: &RolloutBatch, dist: &ContextDistribution) -> Result<CurriculumStats> {
    let value = compute_value_stats(batch, dist)?;
    let (h, omega) = compute_geometry_stats(dist, dist.target())?;
    Ok(CurriculumStats::from_parts(value, h, omega))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_dist() -> ContextDistribution {
        TargetSpec::new(vec![0.0], vec![1.0]).unwrap().as_distribution()
    }

    fn batch(dist: &ContextDistribution, contexts: &[f64], values: &[f64]) -> RolloutBatch {
        RolloutBatch::from_values(
            contexts.iter().map(|c| ContextSample(vec![*c])).collect(),
            values,
            dist.clone(),
        )
        .unwrap()
    }

    #[test]
    fn two_point_batch() {
        let d = unit_dist();
        let b = batch(&d, &[1.0, -1.0], &[2.0, 1.0]);
        let s = compute_value_stats(&b, &d).unwrap();
        assert!((s.u_bar[0] - 0.5).abs() < 1e-15);
        assert!((s.v_bar - 1.5).abs() < 1e-15);
    }

    #[test]
    fn symmetric_contexts_equal_values_cancel() {
        let d = unit_dist();
        let b = batch(&d, &[0.7, -0.7, 2.0, -2.0], &[3.0; 4]);
        let s = compute_value_stats(&b, &d).unwrap();
        assert!(s.u_bar[0].abs() < 1e-15);
    }

    #[test]
    fn psi_bar_at_the_mean() {
        // psi_bar needs a batch of at least two; two copies of (c = mu, V = 1)
        let d = unit_dist();
        let b = batch(&d, &[0.0, 0.0], &[1.0, 1.0]);
        let s = compute_value_stats(&b, &d).unwrap();
        assert!((s.psi_bar[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_foreign_distribution_and_tiny_batches() {
        let d = unit_dist();
        let other = d.with_mu(vec![1e-12]).unwrap();
        let b = batch(&d, &[0.1, 0.2], &[1.0, 1.0]);
        assert!(matches!(compute_value_stats(&b, &other), Err(Error::DistributionMismatch)));
        let one = RolloutBatch::from_values(vec![ContextSample(vec![0.0])], &[1.0], d.clone());
        assert!(matches!(one, Err(Error::BatchTooSmall { .. })));
        let wrong_dim = RolloutBatch::from_values(
            vec![ContextSample(vec![0.0, 1.0]), ContextSample(vec![0.0, 1.0])],
            &[1.0, 1.0],
            d,
        );
        assert!(matches!(wrong_dim, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn geometry_at_target() {
        let t = TargetSpec::new(vec![1.0, -2.0], vec![0.3, 4.0]).unwrap();
        let d = t.as_distribution();
        let (h, omega) = compute_geometry_stats(&d, &t).unwrap();
        assert_eq!(h, vec![1.0, 1.0]);
        assert!(omega.iter().all(|w| w.abs() < 1e-15));
    }

    #[test]
    fn reweighting_at_source_is_identity() {
        let t = TargetSpec::new(vec![0.0, 1.0], vec![1.0, 2.0]).unwrap();
        let d = ContextDistribution::new(vec![0.2, 0.4], vec![1.5, 0.5], t).unwrap();
        let b = RolloutBatch::from_values(
            vec![ContextSample(vec![0.1, 0.9]), ContextSample(vec![-0.3, 0.2]), ContextSample(vec![0.8, 1.1])],
            &[1.0, 4.0, 2.5],
            d.clone(),
        )
        .unwrap();
        assert_eq!(compute_value_stats(&b, &d).unwrap(), reweighted_value_stats(&b, &d).unwrap());
    }

    #[test]
    fn standardize_preserves_condition() {
        let vals = [1.0, 3.0, 8.0, 4.0];
        let (z, vl) = standardize(&vals, 5.0);
        let mean_z = z.iter().sum::<f64>() / 4.0;
        let mean = vals.iter().sum::<f64>() / 4.0;
        assert!(mean_z.abs() < 1e-15);
        assert_eq!(mean < 5.0, mean_z < vl);
    }
}
