//! Randomized self-checks: closed forms against the dual-bisection oracle,
//! batch statistics against finite differences, and update timing.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::synthetic_value;
use crate::error::Result;
use crate::gaussian::{ContextDistribution, TargetSpec};
use crate::oracle::{dispatch_mode, solve_exact_sampled, ExactSolverSettings, LinearizedSubproblem, Multipliers};
use crate::stats::{compute_geometry_stats, compute_stats, kl_theta_gradient, CurriculumStats, RolloutBatch};
use crate::update::{
    convergence_mu_step, convergence_theta_step, mu_convergence_subproblem, mu_performance_subproblem,
    performance_mu_step, performance_theta_delta, theta_convergence_subproblem, theta_performance_subproblem,
    update, ActiveCase, CurriculumConfig,
};
use crate::vecops::{add, norm_inf, rel_dist, scale, sub};

pub const DIMS: [usize; 4] = [1, 2, 3, 5];
pub const STEP_TOL: f64 = 1e-6;
pub const KKT_TOL: f64 = 1e-8;
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const MIN_SPEEDUP: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Instances per block and dimension.
    pub instances: usize,
    pub timing_updates: usize,
    /// Relative error injected into every closed-form step (sensitivity fixture).
    pub perturb: f64,
    pub exact: ExactSolverSettings,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 100,
            timing_updates: 50,
            perturb: 0.0,
            exact: ExactSolverSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub instances: usize,
    /// Largest relative parameter (or gradient) error.
    pub max_error: f64,
    pub error_tolerance: f64,
    /// Largest KKT residual of the closed form, 0 for suites without one.
    pub max_kkt: f64,
    pub kkt_tolerance: f64,
    pub passed: bool,
}

impl SuiteReport {
    fn new(name: &str, error_tolerance: f64, kkt_tolerance: f64) -> Self {
        Self {
            name: name.into(),
            instances: 0,
            max_error: 0.0,
            error_tolerance,
            max_kkt: 0.0,
            kkt_tolerance,
            passed: false,
        }
    }

    fn record(&mut self, error: f64, kkt: f64) {
        self.instances += 1;
        // NaN counts as a failure
        self.max_error = if error.is_nan() { f64::NAN } else { self.max_error.max(error) };
        self.max_kkt = if kkt.is_nan() { f64::NAN } else { self.max_kkt.max(kkt) };
    }

    fn finish(mut self) -> Self {
        self.passed = self.instances > 0 && self.max_error <= self.error_tolerance && self.max_kkt <= self.kkt_tolerance;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub updates: usize,
    pub closed_form_seconds: f64,
    pub numerical_seconds: f64,
    pub speedup: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suites: Vec<SuiteReport>,
    pub timing: Option<TimingReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed) && self.timing.as_ref().is_none_or(|t| t.passed)
    }
}

fn uniform(rng: &mut ChaCha8Rng, d: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(lo..hi)).collect()
}

fn log_uniform(rng: &mut ChaCha8Rng, d: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(lo.ln()..hi.ln()).exp()).collect()
}

fn random_distribution(rng: &mut ChaCha8Rng, d: usize) -> ContextDistribution {
    let target = TargetSpec::new(uniform(rng, d, -2.0, 2.0), log_uniform(rng, d, 0.05, 5.0)).expect("valid target");
    ContextDistribution::new(uniform(rng, d, -3.0, 3.0), log_uniform(rng, d, 0.2, 5.0), target).expect("valid distribution")
}

/// Random statistics with `v_bar` straddling the threshold `v_lower = 1`.
fn random_instance(rng: &mut ChaCha8Rng, d: usize) -> (ContextDistribution, CurriculumStats, CurriculumConfig) {
    let dist = random_distribution(rng, d);
    let (h_diag, omega) = compute_geometry_stats(&dist, dist.target()).expect("matching target");
    let mag = rng.random_range(0.01..3.0);
    let stats = CurriculumStats {
        u_bar: uniform(rng, d, -mag, mag),
        v_bar: 1.0 + rng.random_range(0.0..1.0f64).powi(3) * 2.0,
        psi_bar: uniform(rng, d, -mag, mag),
        h_diag,
        omega,
    };
    let config = CurriculumConfig {
        epsilon: rng.random_range(0.005..0.2),
        v_lower: 1.0,
        theta_min: 1e-6,
        ..Default::default()
    };
    (dist, stats, config)
}

/// Relative step error against the oracle and the KKT residual of the
/// (possibly perturbed) closed-form step.
fn compare(problem: &LinearizedSubproblem, closed: &[f64], multipliers: Multipliers) -> Result<(f64, f64)> {
    let sol = problem.solve_numeric()?;
    let kkt = problem.kkt_residuals(closed, multipliers).max();
    Ok((rel_dist(closed, &sol.step), kkt))
}

fn block_suites(opts: &VerifyOptions) -> Result<Vec<SuiteReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let bump = 1.0 + opts.perturb;
    let mut perf_mu = SuiteReport::new("performance_mu", STEP_TOL, KKT_TOL);
    let mut perf_theta = SuiteReport::new("performance_theta", STEP_TOL, KKT_TOL);
    let mut conv_mu = SuiteReport::new("convergence_mu", STEP_TOL, KKT_TOL);
    let mut conv_theta = SuiteReport::new("convergence_theta", STEP_TOL, KKT_TOL);

    for d in DIMS {
        for _ in 0..opts.instances {
            let (dist, stats, config) = random_instance(&mut rng, d);
            let eps = config.block_epsilon();

            let (mu, mult) = performance_mu_step(&dist, &stats, eps);
            let step = scale(&sub(&mu, dist.mu()), bump);
            let m = Multipliers {
                performance: 0.0,
                ball: mult.unwrap_or(0.0),
            };
            let (e, k) = compare(&mu_performance_subproblem(&dist, &stats, eps), &step, m)?;
            perf_mu.record(e, k);

            let (delta, mult) = performance_theta_delta(&stats, eps);
            let m = Multipliers {
                performance: 0.0,
                ball: mult.unwrap_or(0.0),
            };
            let (e, k) = compare(&theta_performance_subproblem(&stats, eps), &scale(&delta, bump), m)?;
            perf_theta.record(e, k);

            let mu_step = convergence_mu_step(&dist, &stats, &config)?;
            let step = scale(&sub(&mu_step.mu, dist.mu()), bump);
            let m = Multipliers {
                performance: mu_step.lambda_1,
                ball: mu_step.lambda_2 - 1.0,
            };
            let (e, k) = compare(&mu_convergence_subproblem(&dist, &stats, &config), &step, m)?;
            conv_mu.record(e, k);

            let theta_step = convergence_theta_step(&dist, &stats, &config)?;
            if theta_step.case == ActiveCase::BothInactive {
                // block minimizer of the exact KL: its gradient must vanish
                let theta = add(dist.theta(), &scale(&sub(&theta_step.theta, dist.theta()), bump));
                let grad = kl_theta_gradient(dist.mu(), &theta, dist.target());
                conv_theta.record(0.0, norm_inf(&grad).max(theta_step.kkt.max()));
                continue;
            }
            if theta_step.backtrack < 1.0 {
                // clipped by the positivity floor, so not the oracle's solution
                continue;
            }
            let step = scale(&sub(&theta_step.theta, dist.theta()), bump);
            let m = Multipliers {
                performance: theta_step.lambda_3,
                ball: theta_step.lambda_4,
            };
            let (e, k) = compare(&theta_convergence_subproblem(&stats, &config), &step, m)?;
            conv_theta.record(e, k);
        }
    }
    Ok(vec![perf_mu.finish(), perf_theta.finish(), conv_mu.finish(), conv_theta.finish()])
}

fn central_gradient(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let mut hi = x.to_vec();
            let mut lo = x.to_vec();
            hi[j] += FD_STEP;
            lo[j] -= FD_STEP;
            (f(&hi) - f(&lo)) / (2.0 * FD_STEP)
        })
        .collect()
}

fn central_curvature(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let f0 = f(x);
    (0..x.len())
        .map(|j| {
            let mut hi = x.to_vec();
            let mut lo = x.to_vec();
            hi[j] += FD_STEP;
            lo[j] -= FD_STEP;
            (f(&hi) - 2.0 * f0 + f(&lo)) / (FD_STEP * FD_STEP)
        })
        .collect()
}

fn fd_suites(opts: &VerifyOptions) -> Result<Vec<SuiteReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let bump = 1.0 + opts.perturb;
    let mut u = SuiteReport::new("fd_u_bar", FD_TOL, 0.0);
    let mut psi = SuiteReport::new("fd_psi_bar", FD_TOL, 0.0);
    let mut omega = SuiteReport::new("fd_omega", FD_TOL, 0.0);
    let mut h = SuiteReport::new("fd_h", FD_TOL, 0.0);
    for n in 0..opts.instances {
        let d = DIMS[n % DIMS.len()];
        let dist = random_distribution(&mut rng, d);
        let contexts = dist.sample(&mut rng, 16);
        let values = uniform(&mut rng, contexts.len(), -5.0, 10.0);
        let batch = RolloutBatch::from_values(contexts, &values, dist.clone())?;
        let stats = compute_stats(&batch, &dist)?;
        let value_at = |cand: Result<ContextDistribution>| cand.and_then(|c| batch.weighted_value(&c)).unwrap_or(f64::NAN);

        // Sigma^{-1} u_bar is the mean gradient of the sampled value
        let analytic: Vec<f64> = stats.u_bar.iter().zip(dist.precision()).map(|(u, p)| bump * u * p).collect();
        let fd = central_gradient(dist.mu(), |m| value_at(dist.with_mu(m.to_vec())));
        u.record(rel_dist(&analytic, &fd), 0.0);

        let fd = central_gradient(dist.theta(), |t| value_at(dist.with_theta(t.to_vec())));
        psi.record(rel_dist(&scale(&stats.psi_bar, bump), &fd), 0.0);

        let fd = central_gradient(dist.theta(), |t| {
            dist.with_theta(t.to_vec()).map_or(f64::NAN, |c| c.kl_to_target())
        });
        omega.record(rel_dist(&scale(&stats.omega, bump), &fd), 0.0);

        // 1/4 ||d||^2_H is the quadratic model of the scale part of the KL
        let fd = central_curvature(dist.theta(), |t| {
            dist.with_theta(t.to_vec()).and_then(|c| c.kl_scale_part(&dist)).unwrap_or(f64::NAN)
        });
        let half_h: Vec<f64> = stats.h_diag.iter().map(|x| 0.5 * bump * x).collect();
        h.record(rel_dist(&half_h, &fd), 0.0);
    }
    Ok(vec![u.finish(), psi.finish(), omega.finish(), h.finish()])
}

/// Closed-form update against the exact sampled solver at `d = 3`, `K = 64`.
pub fn timing_suite(opts: &VerifyOptions) -> Result<TimingReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7113);
    let mut closed = 0.0;
    let mut exact = 0.0;
    for n in 0..opts.timing_updates {
        let dist = random_distribution(&mut rng, 3);
        let contexts = dist.sample(&mut rng, 64);
        let center = uniform(&mut rng, 3, -3.0, 3.0);
        let width = rng.random_range(0.5..4.0);
        let values = contexts
            .iter()
            .map(|c| synthetic_value(c, &center, width))
            .collect::<Result<Vec<_>>>()?;
        let batch = RolloutBatch::from_values(contexts, &values, dist.clone())?;
        let config = CurriculumConfig {
            epsilon: 0.02,
            v_lower: rng.random_range(0.0..6.0),
            ..Default::default()
        };

        let t = Instant::now();
        let out = update(&dist, &batch, &config)?;
        closed += t.elapsed().as_secs_f64();
        std::hint::black_box(out);

        let settings = ExactSolverSettings {
            seed: opts.exact.seed.wrapping_add(n as u64),
            ..opts.exact.clone()
        };
        let t = Instant::now();
        let mode = dispatch_mode(&batch, &dist, &config)?;
        let out = solve_exact_sampled(&batch, &dist, &config, mode, &settings)?;
        exact += t.elapsed().as_secs_f64();
        std::hint::black_box(out);
    }
    let updates = opts.timing_updates.max(1) as f64;
    let (closed, exact) = (closed / updates, exact / updates);
    let speedup = exact / closed;
    Ok(TimingReport {
        updates: opts.timing_updates,
        closed_form_seconds: closed,
        numerical_seconds: exact,
        speedup,
        passed: speedup >= MIN_SPEEDUP,
    })
}

/// Runs every suite. Timing is skipped when `timing_updates == 0`.
pub fn verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut suites = block_suites(opts)?;
    suites.extend(fd_suites(opts)?);
    let timing = if opts.timing_updates > 0 {
        Some(timing_suite(opts)?)
    } else {
        None
    };
    Ok(VerifyReport { suites, timing })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_healthy_run_passes() {
        let opts = VerifyOptions {
            instances: 5,
            timing_updates: 0,
            ..Default::default()
        };
        let r = verify(&opts).unwrap();
        assert!(r.passed(), "{r:#?}");
    }

    #[test]
    fn perturbed_run_fails_every_suite() {
        let opts = VerifyOptions {
            instances: 5,
            timing_updates: 0,
            perturb: 1e-3,
            ..Default::default()
        };
        let r = verify(&opts).unwrap();
        assert!(r.suites.iter().all(|s| !s.passed), "{r:#?}");
    }
}
