//! Trust-region updates of the context distribution.
//!
//! An update is either a *performance step*, which maximizes the linearized
//! importance-weighted value inside the KL ball, or a *convergence step*,
//! which minimizes the linearized KL to the target subject to the linearized
//! value staying above `v_lower`. Both are solved in closed form, one block
//! (`mu`, then `theta`) at a time.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{ContextDistribution, THETA_FLOOR};
use crate::oracle::linearized::{
    ConstraintKind, KktResiduals, LinearizedSubproblem, Multipliers, PerformanceConstraint,
};
use crate::stats::{
    compute_geometry_stats, compute_stats, kl_theta_gradient, standardize, weighted_value_stats,
    CurriculumStats, RolloutBatch, ValueStats,
};
use crate::vecops::{add, hadamard, norm, norm_inf, scale, sub, wdot, wnorm_sq};

/// Absolute slack on case-selection inequalities.
pub const CASE_TOL: f64 = 1e-10;
/// Bound on every scaled KKT residual of an accepted closed-form solution.
pub const KKT_TOL: f64 = 1e-8;
/// Gradients with Euclidean norm below this carry no direction.
pub const DEGENERATE_TOL: f64 = 1e-10;

fn default_theta_min() -> f64 {
    1e-4
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    /// KL trust-region radius per update.
    pub epsilon: f64,
    /// Performance threshold.
    pub v_lower: f64,
    /// Contexts per batch.
    pub k_contexts: usize,
    /// Learner iterations between curriculum updates.
    pub update_period: usize,
    #[serde(default = "default_theta_min")]
    pub theta_min: f64,
    /// Give each block half of `epsilon`, so the joint step respects the ball.
    #[serde(default = "default_true")]
    pub split_budget: bool,
    /// Follow a performance step by a convergence step in the same update.
    #[serde(default)]
    pub both_steps_per_update: bool,
    /// Standardize returns (and `v_lower` with them) before computing statistics.
    #[serde(default)]
    pub standardize_values: bool,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            v_lower: 0.0,
            k_contexts: 64,
            update_period: 1,
            theta_min: default_theta_min(),
            split_budget: true,
            both_steps_per_update: false,
            standardize_values: false,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !self.v_lower.is_finite() {
            return Err(Error::Config("v_lower must be finite".into()));
        }
        if self.k_contexts < RolloutBatch::MIN_ROLLOUTS {
            return Err(Error::Config(format!("k_contexts must be >= 2, got {}", self.k_contexts)));
        }
        if self.update_period < 1 {
            return Err(Error::Config("update_period must be >= 1".into()));
        }
        if !(self.theta_min >= THETA_FLOOR && self.theta_min.is_finite()) {
            return Err(Error::Config(format!(
                "theta_min must be >= {THETA_FLOOR:e}, got {}",
                self.theta_min
            )));
        }
        Ok(())
    }

    /// Radius used by each block subproblem.
    pub fn block_epsilon(&self) -> f64 {
        if self.split_budget {
            0.5 * self.epsilon
        } else {
            self.epsilon
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActiveCase {
    BothInactive,
    PerfActive,
    ProximityActive,
    BothActive,
}

impl ActiveCase {
    pub const ALL: [ActiveCase; 4] = [
        ActiveCase::BothInactive,
        ActiveCase::PerfActive,
        ActiveCase::ProximityActive,
        ActiveCase::BothActive,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ActiveCase::BothInactive => "both_inactive",
            ActiveCase::PerfActive => "perf_active",
            ActiveCase::ProximityActive => "proximity_active",
            ActiveCase::BothActive => "both_active",
        }
    }
}

impl fmt::Display for ActiveCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Performance,
    Convergence,
    PerformanceThenConvergence,
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepKind::Performance => "performance",
            StepKind::Convergence => "convergence",
            StepKind::PerformanceThenConvergence => "performance+convergence",
        })
    }
}

/// Multipliers of one convergence step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiplierSolution {
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_3: f64,
    pub lambda_4: f64,
    pub mu_case: ActiveCase,
    pub theta_case: ActiveCase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuStep {
    pub mu: Vec<f64>,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub case: ActiveCase,
    pub kkt: KktResiduals,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaStep {
    pub theta: Vec<f64>,
    pub lambda_3: f64,
    pub lambda_4: f64,
    pub case: ActiveCase,
    pub kkt: KktResiduals,
    /// Scale applied to the step to keep `theta >= theta_min` (1 when untouched).
    pub backtrack: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerformanceDetail {
    /// Ball multiplier of the `mu` block; `None` when its gradient is degenerate.
    pub mu_multiplier: Option<f64>,
    pub theta_multiplier: Option<f64>,
    pub backtrack: f64,
    pub kkt: KktResiduals,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceDetail {
    pub multipliers: MultiplierSolution,
    pub backtrack: f64,
    pub kkt: KktResiduals,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub kind: StepKind,
    /// No informative direction: the distribution was returned unchanged.
    pub degenerate: bool,
    pub v_bar: f64,
    /// Threshold actually compared against `v_bar` (differs from the config when standardizing).
    pub v_lower: f64,
    pub performance: Option<PerformanceDetail>,
    pub convergence: Option<ConvergenceDetail>,
    pub kl_step: f64,
    pub kl_to_target_before: f64,
    pub kl_to_target_after: f64,
}

impl UpdateReport {
    pub fn step_label(&self) -> String {
        if self.degenerate {
            "degenerate".into()
        } else {
            self.kind.to_string()
        }
    }

    pub fn case_label(&self) -> String {
        match &self.convergence {
            Some(c) => format!("{}/{}", c.multipliers.mu_case, c.multipliers.theta_case),
            None if self.degenerate => "none".into(),
            None => "trust_region".into(),
        }
    }

    /// Largest KKT residual over all sub-steps.
    pub fn kkt_max(&self) -> f64 {
        let p = self.performance.as_ref().map_or(0.0, |p| p.kkt.max());
        let c = self.convergence.as_ref().map_or(0.0, |c| c.kkt.max());
        p.max(c)
    }
}

/// Dispatch rule: the performance step runs iff the batch value is below the threshold.
pub fn should_run_performance_step(stats: &CurriculumStats, config: &CurriculumConfig) -> bool {
    stats.v_bar < config.v_lower
}

/// Largest `s` in `[0, 1]` with `theta + s * delta >= theta_min` componentwise.
fn positivity_scale(theta: &[f64], delta: &[f64], theta_min: f64) -> f64 {
    theta.iter().zip(delta).fold(1.0_f64, |s, (t, d)| {
        if t + d < theta_min && *d < 0.0 {
            s.min(((t - theta_min) / -d).max(0.0))
        } else {
            s
        }
    })
}

fn apply_theta_step(theta: &[f64], delta: &[f64], theta_min: f64) -> (Vec<f64>, f64) {
    let s = positivity_scale(theta, delta, theta_min);
    let mut out: Vec<f64> = theta.iter().zip(delta).map(|(t, d)| t + s * d).collect();
    if s < 1.0 {
        // guard against rounding just below the floor
        for t in &mut out {
            *t = t.max(theta_min.min(*t + f64::EPSILON));
        }
    }
    (out, s)
}

fn h_inverse(stats: &CurriculumStats) -> Vec<f64> {
    stats.h_diag.iter().map(|h| 1.0 / h).collect()
}

fn check_stats(dist: &ContextDistribution, stats: &CurriculumStats) -> Result<()> {
    let d = dist.dim();
    for len in [stats.u_bar.len(), stats.psi_bar.len(), stats.h_diag.len(), stats.omega.len()] {
        Error::check_dim(d, len)?;
    }
    if !stats.v_bar.is_finite()
        || stats.u_bar.iter().chain(&stats.psi_bar).chain(&stats.omega).any(|x| !x.is_finite())
    {
        return Err(Error::InvalidParameter("non-finite curriculum statistics".into()));
    }
    if stats.h_diag.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
        return Err(Error::InvalidParameter("H must be positive definite".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Linearized subproblems, shared with the oracle for cross-checking.

/// `max <u_bar, dmu>_{Sigma^{-1}}` over `1/2 ||dmu||^2_{Sigma^{-1}} <= eps`.
pub fn mu_performance_subproblem(dist: &ContextDistribution, stats: &CurriculumStats, eps: f64) -> LinearizedSubproblem {
    let prec = dist.precision();
    LinearizedSubproblem {
        kind: ConstraintKind::KlBallMu,
        objective_gradient: scale(&hadamard(&prec, &stats.u_bar), -1.0),
        objective_curvature: 0.0,
        metric: prec,
        radius: 2.0 * eps,
        performance: None,
    }
}

/// `max <psi_bar, dtheta>` over `1/4 ||dtheta||^2_H <= eps`.
pub fn theta_performance_subproblem(stats: &CurriculumStats, eps: f64) -> LinearizedSubproblem {
    LinearizedSubproblem {
        kind: ConstraintKind::KlBallTheta,
        objective_gradient: scale(&stats.psi_bar, -1.0),
        objective_curvature: 0.0,
        metric: stats.h_diag.clone(),
        radius: 4.0 * eps,
        performance: None,
    }
}

/// `min 1/2 ||mu + dmu - mu_t||^2_{Sigma^{-1}}` subject to the linearized value
/// constraint and the `mu` trust region.
pub fn mu_convergence_subproblem(
    dist: &ContextDistribution,
    stats: &CurriculumStats,
    config: &CurriculumConfig,
) -> LinearizedSubproblem {
    let prec = dist.precision();
    let a = sub(dist.target().mu_tilde(), dist.mu());
    LinearizedSubproblem {
        kind: ConstraintKind::KlBallMu,
        objective_gradient: scale(&hadamard(&prec, &a), -1.0),
        objective_curvature: 1.0,
        performance: Some(PerformanceConstraint {
            gradient: hadamard(&prec, &stats.u_bar),
            offset: stats.v_bar - config.v_lower,
        }),
        metric: prec,
        radius: 2.0 * config.block_epsilon(),
    }
}

/// `min <omega, dtheta>` subject to the linearized value constraint and the
/// `theta` trust region.
pub fn theta_convergence_subproblem(stats: &CurriculumStats, config: &CurriculumConfig) -> LinearizedSubproblem {
    LinearizedSubproblem {
        kind: ConstraintKind::KlBallTheta,
        objective_gradient: stats.omega.clone(),
        objective_curvature: 0.0,
        metric: stats.h_diag.clone(),
        radius: 4.0 * config.block_epsilon(),
        performance: Some(PerformanceConstraint {
            gradient: stats.psi_bar.clone(),
            offset: stats.v_bar - config.v_lower,
        }),
    }
}

// ---------------------------------------------------------------------------
// Performance step

pub fn performance_mu_step(dist: &ContextDistribution, stats: &CurriculumStats, eps: f64) -> (Vec<f64>, Option<f64>) {
    if norm(&stats.u_bar) < DEGENERATE_TOL {
        return (dist.mu().to_vec(), None);
    }
    let prec = dist.precision();
    let len = wnorm_sq(&stats.u_bar, &prec).sqrt();
    let r = (2.0 * eps).sqrt();
    let mu = add(dist.mu(), &scale(&stats.u_bar, r / len));
    (mu, Some(len / r))
}

/// Returns the unclamped `theta` displacement and the ball multiplier.
pub fn performance_theta_delta(stats: &CurriculumStats, eps: f64) -> (Vec<f64>, Option<f64>) {
    let d = stats.psi_bar.len();
    if norm(&stats.psi_bar) < DEGENERATE_TOL {
        return (vec![0.0; d], None);
    }
    let h_inv = h_inverse(stats);
    let len = wnorm_sq(&stats.psi_bar, &h_inv).sqrt();
    let r = 2.0 * eps.sqrt();
    (scale(&hadamard(&h_inv, &stats.psi_bar), r / len), Some(len / r))
}

/// Trust-region value ascent on both blocks against the current geometry.
pub fn performance_step(
    dist: &ContextDistribution,
    stats: &CurriculumStats,
    config: &CurriculumConfig,
) -> Result<(ContextDistribution, PerformanceDetail)> {
    check_stats(dist, stats)?;
    let eps = config.block_epsilon();
    let (mu, mu_mult) = performance_mu_step(dist, stats, eps);
    let (delta, theta_mult) = performance_theta_delta(stats, eps);
    if mu_mult.is_none() && theta_mult.is_none() {
        return Err(Error::DegenerateUpdate {
            threshold: DEGENERATE_TOL,
        });
    }
    let (theta, backtrack) = apply_theta_step(dist.theta(), &delta, config.theta_min);

    let mut kkt = KktResiduals::default();
    if let Some(lb) = mu_mult {
        let p = mu_performance_subproblem(dist, stats, eps);
        let m = Multipliers {
            performance: 0.0,
            ball: lb,
        };
        kkt = KktResiduals::worst(kkt, p.kkt_residuals(&sub(&mu, dist.mu()), m));
    }
    if let Some(lb) = theta_mult {
        let p = theta_performance_subproblem(stats, eps);
        let m = Multipliers {
            performance: 0.0,
            ball: lb,
        };
        kkt = KktResiduals::worst(kkt, p.kkt_residuals(&delta, m));
    }
    let next = ContextDistribution::new(mu, theta, dist.target().clone())?;
    Ok((
        next,
        PerformanceDetail {
            mu_multiplier: mu_mult,
            theta_multiplier: theta_mult,
            backtrack,
            kkt,
        },
    ))
}

// ---------------------------------------------------------------------------
// Convergence step, mu block

struct MuScalars {
    a: Vec<f64>,
    /// `||a||^2`, `||u||^2`, `<u, a>` in the `Sigma^{-1}` metric.
    aa: f64,
    gg: f64,
    pa: f64,
    dv: f64,
    eps: f64,
}

impl MuScalars {
    fn new(dist: &ContextDistribution, stats: &CurriculumStats, config: &CurriculumConfig) -> Self {
        let prec = dist.precision();
        let a = sub(dist.target().mu_tilde(), dist.mu());
        Self {
            aa: wnorm_sq(&a, &prec),
            gg: wnorm_sq(&stats.u_bar, &prec),
            pa: wdot(&stats.u_bar, &a, &prec),
            a,
            dv: stats.v_bar - config.v_lower,
            eps: config.block_epsilon(),
        }
    }

    fn conditions_hold(&self, case: ActiveCase) -> bool {
        let two_eps = 2.0 * self.eps;
        match case {
            ActiveCase::BothInactive => self.aa <= two_eps + CASE_TOL && self.dv + self.pa >= -CASE_TOL,
            ActiveCase::PerfActive => {
                self.gg > 0.0
                    && self.dv + self.pa <= CASE_TOL
                    && self.aa + (self.dv * self.dv - self.pa * self.pa) / self.gg <= two_eps + CASE_TOL
            }
            ActiveCase::ProximityActive => {
                self.aa >= two_eps - CASE_TOL
                    && self.aa > 0.0
                    && self.dv + two_eps.sqrt() * self.pa / self.aa.sqrt() >= -CASE_TOL
            }
            ActiveCase::BothActive => match self.multipliers(case) {
                Some((l1, l2)) => l1 >= -CASE_TOL && l2 >= 1.0 - CASE_TOL,
                None => false,
            },
        }
    }

    fn multipliers(&self, case: ActiveCase) -> Option<(f64, f64)> {
        match case {
            ActiveCase::BothInactive => Some((0.0, 1.0)),
            ActiveCase::PerfActive => (self.gg > 0.0).then(|| (-(self.dv + self.pa) / self.gg, 1.0)),
            ActiveCase::ProximityActive => {
                (self.aa > 0.0).then(|| (0.0, (self.aa / (2.0 * self.eps)).sqrt()))
            }
            ActiveCase::BothActive => {
                let num = self.aa * self.gg - self.pa * self.pa;
                let den = 2.0 * self.eps * self.gg - self.dv * self.dv;
                if self.gg <= 0.0 || den <= 0.0 || num < 0.0 {
                    return None;
                }
                let l2 = (num / den).sqrt();
                Some((-(l2 * self.dv + self.pa) / self.gg, l2))
            }
        }
    }

    fn step(&self, u_bar: &[f64], l1: f64, l2: f64) -> Vec<f64> {
        self.a.iter().zip(u_bar).map(|(a, u)| (a + l1 * u) / l2).collect()
    }

    fn infeasible(&self) -> bool {
        self.dv < 0.0 && (self.gg == 0.0 || self.dv * self.dv > 2.0 * self.eps * self.gg)
    }
}

/// Closed-form multipliers `(lambda_1, lambda_2)` and the active case of the
/// `mu` convergence subproblem.
pub fn solve_mu_multipliers(
    stats: &CurriculumStats,
    dist: &ContextDistribution,
    config: &CurriculumConfig,
) -> Result<(f64, f64, ActiveCase)> {
    Ok(solve_mu_block(stats, dist, config)?.0)
}

fn solve_mu_block(
    stats: &CurriculumStats,
    dist: &ContextDistribution,
    config: &CurriculumConfig,
) -> Result<((f64, f64, ActiveCase), Vec<f64>, KktResiduals)> {
    check_stats(dist, stats)?;
    let s = MuScalars::new(dist, stats, config);
    if s.infeasible() {
        return Err(Error::Infeasible(format!(
            "value deficit {:.3e} cannot be recovered inside the mean trust region",
            -s.dv
        )));
    }
    let problem = mu_convergence_subproblem(dist, stats, config);
    let certify = |case: ActiveCase| {
        let (l1, l2) = s.multipliers(case)?;
        let step = s.step(&stats.u_bar, l1, l2);
        let kkt = problem.kkt_residuals(
            &step,
            Multipliers {
                performance: l1,
                ball: l2 - 1.0,
            },
        );
        Some(((l1, l2, case), step, kkt))
    };

    if let Some(case) = ActiveCase::ALL.into_iter().find(|c| s.conditions_hold(*c)) {
        if let Some(sol) = certify(case) {
            if sol.2.max() <= KKT_TOL {
                return Ok(sol);
            }
        }
    }
    // the instance sits on a case boundary: let the certificate decide
    ActiveCase::ALL
        .into_iter()
        .filter_map(certify)
        .filter(|sol| sol.2.max() <= KKT_TOL)
        .min_by(|x, y| problem.objective(&x.1).total_cmp(&problem.objective(&y.1)))
        .ok_or_else(|| Error::Infeasible("no multiplier case satisfies the KKT conditions".into()))
}

/// Convergence update of the mean, `mu + (mu_t - mu + lambda_1 u_bar) / lambda_2`.
pub fn convergence_mu_step(
    dist: &ContextDistribution,
    stats: &CurriculumStats,
    config: &CurriculumConfig,
) -> Result<MuStep> {
    let ((lambda_1, lambda_2, case), step, kkt) = solve_mu_block(stats, dist, config)?;
    let mu = if case == ActiveCase::BothInactive {
        // exact, without the round trip through the displacement
        dist.target().mu_tilde().to_vec()
    } else {
        add(dist.mu(), &step)
    };
    Ok(MuStep {
        mu,
        lambda_1,
        lambda_2,
        case,
        kkt,
    })
}

// ---------------------------------------------------------------------------
// Convergence step, theta block

struct ThetaScalars {
    h_inv: Vec<f64>,
    /// `||omega||^2`, `||psi||^2`, `<psi, omega>` in the `H^{-1}` metric.
    ww: f64,
    pp: f64,
    pw: f64,
    dv: f64,
    eps: f64,
}

impl ThetaScalars {
    fn new(stats: &CurriculumStats, config: &CurriculumConfig) -> Self {
        let h_inv = h_inverse(stats);
        Self {
            ww: wnorm_sq(&stats.omega, &h_inv),
            pp: wnorm_sq(&stats.psi_bar, &h_inv),
            pw: wdot(&stats.psi_bar, &stats.omega, &h_inv),
            h_inv,
            dv: stats.v_bar - config.v_lower,
            eps: config.block_epsilon(),
        }
    }

    fn multipliers(&self, case: ActiveCase) -> Option<(f64, f64)> {
        match case {
            ActiveCase::ProximityActive => {
                (self.ww > 0.0).then(|| (0.0, self.ww.sqrt() / (2.0 * self.eps.sqrt())))
            }
            ActiveCase::BothActive => {
                let num = self.ww * self.pp - self.pw * self.pw;
                let den = 4.0 * self.eps * self.pp - self.dv * self.dv;
                if self.pp <= 0.0 || den <= 0.0 || self.parallel() {
                    return None;
                }
                let l4 = (num.max(0.0) / den).sqrt();
                Some(((self.pw - l4 * self.dv) / self.pp, l4))
            }
            // omega parallel to psi_bar: the linear objective is constant on the
            // constraint hyperplane and the ball multiplier vanishes
            ActiveCase::PerfActive => {
                (self.pp > 0.0 && self.parallel()).then(|| (self.pw / self.pp, 0.0))
            }
            ActiveCase::BothInactive => None,
        }
    }

    /// `omega` and `psi_bar` are collinear (always the case in one dimension).
    fn parallel(&self) -> bool {
        self.ww * self.pp - self.pw * self.pw <= 1e-12 * self.ww * self.pp
    }

    fn conditions_hold(&self, case: ActiveCase) -> bool {
        match (case, self.multipliers(case)) {
            (ActiveCase::ProximityActive, Some((_, l4))) => self.dv - self.pw / l4 >= -CASE_TOL,
            (ActiveCase::PerfActive, Some((l3, _))) => {
                l3 >= -CASE_TOL && self.dv * self.dv <= 4.0 * self.eps * self.pp + CASE_TOL
            }
            (ActiveCase::BothActive, Some((l3, l4))) => l3 >= -CASE_TOL && l4 > 0.0,
            _ => false,
        }
    }

    fn step(&self, stats: &CurriculumStats, l3: f64, l4: f64) -> Vec<f64> {
        if l4 == 0.0 {
            // minimum-norm point of the active hyperplane
            return (0..self.h_inv.len())
                .map(|j| -self.dv * self.h_inv[j] * stats.psi_bar[j] / self.pp)
                .collect();
        }
        (0..self.h_inv.len())
            .map(|j| self.h_inv[j] * (l3 * stats.psi_bar[j] - stats.omega[j]) / l4)
            .collect()
    }

    fn infeasible(&self) -> bool {
        self.dv < 0.0 && (self.pp == 0.0 || self.dv * self.dv > 4.0 * self.eps * self.pp)
    }
}

/// Minimizer of the exact KL to the target over `theta` with the mean held at `mu`.
pub fn theta_block_minimizer(dist: &ContextDistribution) -> Vec<f64> {
    let t = dist.target();
    (0..dist.dim())
        .map(|j| 1.0 + (dist.mu()[j] - t.mu_tilde()[j]).powi(2) / t.sigma_tilde_diag()[j])
        .collect()
}

/// Certificate of the unconstrained branch: stationarity of the exact KL.
fn reach_certificate(dist: &ContextDistribution, theta: &[f64], problem: &LinearizedSubproblem) -> KktResiduals {
    let grad = kl_theta_gradient(dist.mu(), theta, dist.target());
    let scale_s = 1.0 + norm_inf(&problem.objective_gradient);
    let x = sub(theta, dist.theta());
    let mut r = problem.kkt_residuals(&x, Multipliers::default());
    r.stationarity = norm_inf(&grad) / scale_s;
    r
}

/// Closed-form multipliers `(lambda_3, lambda_4)` and the active case of the
/// `theta` convergence subproblem. `dist` is the point at which `stats.omega`
/// was evaluated. In the unconstrained branch both multipliers are zero.
pub fn solve_theta_multipliers(
    stats: &CurriculumStats,
    dist: &ContextDistribution,
    config: &CurriculumConfig,
) -> Result<(f64, f64, ActiveCase)> {
    let step = solve_theta_block(stats, dist, config)?;
    Ok((step.lambda_3, step.lambda_4, step.case))
}

fn solve_theta_block(
    stats: &CurriculumStats,
    dist: &ContextDistribution,
    config: &CurriculumConfig,
) -> Result<ThetaStep> {
    check_stats(dist, stats)?;
    let s = ThetaScalars::new(stats, config);
    let problem = theta_convergence_subproblem(stats, config);
    let theta = dist.theta();

    // unconstrained branch: jump to the block minimizer if both constraints allow it
    let reach = theta_block_minimizer(dist);
    let reach_delta = sub(&reach, theta);
    let reach_kl = 0.25 * wnorm_sq(&reach_delta, &stats.h_diag);
    let reach_perf = s.dv + crate::vecops::dot(&stats.psi_bar, &reach_delta);
    if reach_kl <= s.eps + CASE_TOL && reach_perf >= -CASE_TOL {
        let kkt = reach_certificate(dist, &reach, &problem);
        return Ok(ThetaStep {
            theta: reach,
            lambda_3: 0.0,
            lambda_4: 0.0,
            case: ActiveCase::BothInactive,
            kkt,
            backtrack: 1.0,
        });
    }
    if s.infeasible() {
        return Err(Error::Infeasible(format!(
            "value deficit {:.3e} cannot be recovered inside the scale trust region",
            -s.dv
        )));
    }
    if s.ww == 0.0 {
        // flat linearized objective: stay put
        let zero = vec![0.0; theta.len()];
        let kkt = problem.kkt_residuals(&zero, Multipliers::default());
        return Ok(ThetaStep {
            theta: theta.to_vec(),
            lambda_3: 0.0,
            lambda_4: 0.0,
            case: ActiveCase::BothInactive,
            kkt,
            backtrack: 1.0,
        });
    }

    let certify = |case: ActiveCase| {
        let (l3, l4) = s.multipliers(case)?;
        let delta = s.step(stats, l3, l4);
        let kkt = problem.kkt_residuals(
            &delta,
            Multipliers {
                performance: l3,
                ball: l4,
            },
        );
        Some((l3, l4, case, delta, kkt))
    };
    let candidates = [ActiveCase::ProximityActive, ActiveCase::PerfActive, ActiveCase::BothActive];
    let chosen = candidates
        .into_iter()
        .find(|c| s.conditions_hold(*c))
        .and_then(certify)
        .filter(|sol| sol.4.max() <= KKT_TOL)
        .or_else(|| {
            candidates
                .into_iter()
                .filter_map(certify)
                .filter(|sol| sol.4.max() <= KKT_TOL)
                .min_by(|x, y| problem.objective(&x.3).total_cmp(&problem.objective(&y.3)))
        });
    let Some((lambda_3, lambda_4, case, delta, kkt)) = chosen else {
        return Err(Error::Infeasible("no multiplier case satisfies the KKT conditions".into()));
    };
    let (theta_new, backtrack) = apply_theta_step(theta, &delta, config.theta_min);
    Ok(ThetaStep {
        theta: theta_new,
        lambda_3,
        lambda_4,
        case,
        kkt,
        backtrack,
    })
}

/// Convergence update of `theta`, `theta + H^{-1}(lambda_3 psi_bar - omega) / lambda_4`,
/// or the block minimizer when neither constraint binds.
pub fn convergence_theta_step(
    dist: &ContextDistribution,
    stats: &CurriculumStats,
    config: &CurriculumConfig,
) -> Result<ThetaStep> {
    solve_theta_block(stats, dist, config)
}

/// One block sweep: the mean block against `stats`, then the scale block with
/// the KL gradient refreshed at the new mean.
pub fn convergence_step(
    dist: &ContextDistribution,
    stats: &CurriculumStats,
    config: &CurriculumConfig,
) -> Result<(ContextDistribution, ConvergenceDetail)> {
    let mu_step = convergence_mu_step(dist, stats, config)?;
    let mid = dist.with_mu(mu_step.mu.clone())?;
    let (h_diag, omega) = compute_geometry_stats(&mid, mid.target())?;
    let theta_stats = CurriculumStats {
        h_diag,
        omega,
        ..stats.clone()
    };
    let theta_step = convergence_theta_step(&mid, &theta_stats, config)?;
    let next = mid.with_theta(theta_step.theta.clone())?;
    Ok((
        next,
        ConvergenceDetail {
            multipliers: MultiplierSolution {
                lambda_1: mu_step.lambda_1,
                lambda_2: mu_step.lambda_2,
                lambda_3: theta_step.lambda_3,
                lambda_4: theta_step.lambda_4,
                mu_case: mu_step.case,
                theta_case: theta_step.case,
            },
            backtrack: theta_step.backtrack,
            kkt: KktResiduals::worst(mu_step.kkt, theta_step.kkt),
        },
    ))
}

// ---------------------------------------------------------------------------

/// Statistics of `batch` at `center`, with the returns optionally replaced by `values`.
fn stats_at(
    batch: &RolloutBatch,
    center: &ContextDistribution,
    values: &[f64],
) -> Result<CurriculumStats> {
    let weighted: Vec<f64> = if center == batch.source() {
        values.to_vec()
    } else {
        let mut w = Vec::with_capacity(values.len());
        for (r, v) in batch.rollouts().iter().zip(values) {
            w.push(center.importance_ratio(batch.source(), &r.context)? * v);
        }
        w
    };
    let value: ValueStats = weighted_value_stats(batch, center, &weighted)?;
    let (h, omega) = compute_geometry_stats(center, center.target())?;
    Ok(CurriculumStats::from_parts(value, h, omega))
}

/// One curriculum update from a batch generated by `dist`.
///
/// A degenerate batch (no usable gradient in the performance step) returns
/// `dist` unchanged with `report.degenerate` set.
pub fn update(
    dist: &ContextDistribution,
    batch: &RolloutBatch,
    config: &CurriculumConfig,
) -> Result<(ContextDistribution, UpdateReport)> {
    config.validate()?;
    let mut stats = compute_stats(batch, dist)?;
    let mut cfg = config.clone();
    let mut values = batch.values();
    if config.standardize_values {
        let (z, v_lower) = standardize(&values, config.v_lower);
        stats = stats_at(batch, dist, &z)?;
        cfg.v_lower = v_lower;
        values = z;
    }

    let mut report = UpdateReport {
        kind: StepKind::Convergence,
        degenerate: false,
        v_bar: stats.v_bar,
        v_lower: cfg.v_lower,
        performance: None,
        convergence: None,
        kl_step: 0.0,
        kl_to_target_before: dist.kl_to_target(),
        kl_to_target_after: dist.kl_to_target(),
    };

    let next = if should_run_performance_step(&stats, &cfg) {
        report.kind = StepKind::Performance;
        let (mid, detail) = match performance_step(dist, &stats, &cfg) {
            Ok(out) => out,
            Err(Error::DegenerateUpdate { .. }) => {
                log::warn!("degenerate curriculum batch; distribution left unchanged");
                report.degenerate = true;
                return Ok((dist.clone(), report));
            }
            Err(e) => return Err(e),
        };
        report.performance = Some(detail);
        if cfg.both_steps_per_update {
            let mid_stats = stats_at(batch, &mid, &values)?;
            if !should_run_performance_step(&mid_stats, &cfg) {
                let (out, detail) = convergence_step(&mid, &mid_stats, &cfg)?;
                report.kind = StepKind::PerformanceThenConvergence;
                report.convergence = Some(detail);
                out
            } else {
                mid
            }
        } else {
            mid
        }
    } else {
        let (out, detail) = convergence_step(dist, &stats, &cfg)?;
        report.convergence = Some(detail);
        out
    };
    report.kl_step = next.kl_between(dist)?;
    report.kl_to_target_after = next.kl_to_target();
    Ok((next, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::TargetSpec;

    fn dist1(mu: f64, theta: f64) -> ContextDistribution {
        ContextDistribution::new(vec![mu], vec![theta], TargetSpec::new(vec![0.0], vec![1.0]).unwrap()).unwrap()
    }

    fn stats1(u: f64, v: f64, psi: f64, h: f64, omega: f64) -> CurriculumStats {
        CurriculumStats {
            u_bar: vec![u],
            v_bar: v,
            psi_bar: vec![psi],
            h_diag: vec![h],
            omega: vec![omega],
        }
    }

    fn cfg(eps: f64, v_lower: f64) -> CurriculumConfig {
        CurriculumConfig {
            epsilon: eps,
            v_lower,
            split_budget: false,
            ..Default::default()
        }
    }

    #[test]
    fn dispatch_rule() {
        let c = cfg(0.1, 5.0);
        assert!(should_run_performance_step(&stats1(0.0, 1.4, 0.0, 1.0, 0.0), &c));
        assert!(!should_run_performance_step(&stats1(0.0, 5.0, 0.0, 1.0, 0.0), &c));
        assert!(!should_run_performance_step(&stats1(0.0, 100.0, 0.0, 1.0, 0.0), &c));
    }

    #[test]
    fn performance_mean_example() {
        let d = dist1(0.0, 1.0);
        let (next, detail) = performance_step(&d, &stats1(0.5, 0.0, 0.0, 1.0, 0.0), &cfg(0.08, 1.0)).unwrap();
        assert!((next.mu()[0] - 0.4).abs() < 1e-15);
        assert_eq!(next.theta(), &[1.0]);
        assert!(detail.theta_multiplier.is_none());
        assert!(detail.kkt.max() < 1e-12);
    }

    #[test]
    fn performance_theta_example() {
        let d = dist1(0.0, 1.0);
        let (next, _) = performance_step(&d, &stats1(0.0, 0.0, -0.5, 1.0, 0.0), &cfg(0.01, 1.0)).unwrap();
        assert!((next.theta()[0] - 0.8).abs() < 1e-15);
        assert_eq!(next.mu(), &[0.0]);
    }

    #[test]
    fn performance_degenerate() {
        let d = dist1(0.0, 1.0);
        let r = performance_step(&d, &stats1(1e-12, 0.0, -1e-12, 1.0, 0.0), &cfg(0.01, 1.0));
        assert!(matches!(r, Err(Error::DegenerateUpdate { .. })));
    }

    #[test]
    fn mu_both_inactive_lands_on_target() {
        let d = dist1(-0.1, 1.0);
        let st = stats1(0.0, 10.0, 0.0, 1.0, 0.0);
        let step = convergence_mu_step(&d, &st, &cfg(0.02, 1.0)).unwrap();
        assert_eq!(step.case, ActiveCase::BothInactive);
        assert_eq!((step.lambda_1, step.lambda_2), (0.0, 1.0));
        assert_eq!(step.mu, vec![0.0]);
    }

    #[test]
    fn mu_proximity_example() {
        let d = dist1(-1.0, 1.0);
        let st = stats1(0.0, 1e6, 0.0, 1.0, 0.0);
        let (l1, l2, case) = solve_mu_multipliers(&st, &d, &cfg(0.02, 1.0)).unwrap();
        assert_eq!(case, ActiveCase::ProximityActive);
        assert_eq!(l1, 0.0);
        assert!((l2 - 5.0).abs() < 1e-12);
        let step = convergence_mu_step(&d, &st, &cfg(0.02, 1.0)).unwrap();
        assert!((step.mu[0] - (-1.0 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn mu_infeasible_is_reported() {
        let d = dist1(-1.0, 1.0);
        let st = stats1(0.1, 0.0, 0.0, 1.0, 0.0);
        assert!(matches!(solve_mu_multipliers(&st, &d, &cfg(0.02, 1.0)), Err(Error::Infeasible(_))));
    }

    #[test]
    fn theta_proximity_example() {
        // mean far from the target keeps the block minimizer outside the ball
        let d = dist1(-1.0, 1.0);
        let st = stats1(0.0, 1e6, 0.0, 1.0, 0.3);
        let step = convergence_theta_step(&d, &st, &cfg(0.0225, 1.0)).unwrap();
        assert_eq!(step.case, ActiveCase::ProximityActive);
        assert!((step.lambda_4 - 1.0).abs() < 1e-12);
        assert!((step.theta[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn theta_reach_returns_ones_at_target_mean() {
        let d = dist1(0.0, 1.05);
        let (h, omega) = compute_geometry_stats(&d, d.target()).unwrap();
        let st = CurriculumStats {
            h_diag: h,
            omega,
            ..stats1(0.0, 10.0, 0.0, 1.0, 0.0)
        };
        let step = convergence_theta_step(&d, &st, &cfg(0.01, 1.0)).unwrap();
        assert_eq!(step.case, ActiveCase::BothInactive);
        assert_eq!(step.theta, vec![1.0]);
        assert!(step.kkt.max() < 1e-12);
    }

    #[test]
    fn theta_at_target_is_identity() {
        let d = dist1(0.0, 1.0);
        let step = convergence_theta_step(&d, &stats1(0.0, 10.0, 0.3, 1.0, 0.0), &cfg(0.01, 1.0)).unwrap();
        assert_eq!(step.theta, vec![1.0]);
    }

    #[test]
    fn positivity_backtracking() {
        let (t, s) = apply_theta_step(&[1.0, 1.0], &[-2.0, 0.5], 0.5);
        assert!((s - 0.25).abs() < 1e-15);
        assert!((t[0] - 0.5).abs() < 1e-15 && (t[1] - 1.125).abs() < 1e-15);
        let (_, s) = apply_theta_step(&[1.0], &[-0.1], 0.5);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn update_near_target_returns_target() {
        let target = TargetSpec::new(vec![0.0, 1.0], vec![1.0, 4.0]).unwrap();
        let d = ContextDistribution::new(vec![0.01, 1.02], vec![1.01, 0.99], target.clone()).unwrap();
        let batch = RolloutBatch::from_values(
            vec![vec![0.0, 1.0].into(), vec![0.1, 0.9].into()],
            &[10.0, 10.0],
            d.clone(),
        )
        .unwrap();
        let (next, report) = update(&d, &batch, &cfg(0.05, 1.0)).unwrap();
        assert_eq!(report.kind, StepKind::Convergence);
        assert_eq!(next, target.as_distribution());
        assert_eq!(report.case_label(), "both_inactive/both_inactive");
    }

    #[test]
    fn update_reports_performance_kind() {
        let target = TargetSpec::new(vec![0.0], vec![1.0]).unwrap();
        let d = ContextDistribution::new(vec![2.0], vec![1.0], target).unwrap();
        let batch = RolloutBatch::from_values(vec![vec![1.0].into(), vec![3.0].into()], &[1.0, 0.0], d.clone()).unwrap();
        let (next, report) = update(&d, &batch, &cfg(0.05, 5.0)).unwrap();
        assert_eq!(report.kind, StepKind::Performance);
        assert!(next.mu()[0] < 2.0);
        assert!(report.kl_step <= 0.05 * 1.1 * 2.0);
    }

    #[test]
    fn update_degenerate_batch_is_flagged() {
        let target = TargetSpec::new(vec![0.0], vec![1.0]).unwrap();
        let d = target.as_distribution();
        let batch = RolloutBatch::from_values(vec![vec![0.0].into(), vec![0.0].into()], &[0.0, 0.0], d.clone()).unwrap();
        let (next, report) = update(&d, &batch, &cfg(0.05, 5.0)).unwrap();
        assert!(report.degenerate);
        assert_eq!(next, d);
        assert_eq!(report.step_label(), "degenerate");
    }
}
