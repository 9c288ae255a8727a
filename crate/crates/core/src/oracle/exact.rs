//! Multi-start projected-gradient solver for the exact sampled subproblems.
//!
//! The blocks and their coupling mirror the closed-form update: the
//! performance step solves both blocks against the pre-update iterate, the
//! convergence step solves the mean block first and refreshes the KL objective
//! at the new mean for the scale block. Inside each block the linearized
//! quantities are replaced by the exact importance-weighted value and the
//! exact KL divergences.
//!
//! Each block is optimized in whitened coordinates `z`:
//! `mu = mu_i + sqrt(var_i) * z`, which makes the mean KL exactly `|z|^2 / 2`,
//! and `theta = theta_i * (1 + sqrt(2) z)`, whose KL is `|z|^2 / 2` to second order.

use std::f64::consts::SQRT_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{theta_kl, ContextDistribution, RATIO_CLAMP};
use crate::stats::{compute_stats, kl_theta_gradient, RolloutBatch};
use crate::update::{should_run_performance_step, CurriculumConfig};
use crate::vecops::{dot, norm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    Performance,
    Convergence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExactSolverSettings {
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    /// Stop a restart once the trial step length (in whitened units) drops below this.
    #[serde(default = "default_step_tol")]
    pub step_tolerance: f64,
}

fn default_restarts() -> usize {
    8
}

fn default_iterations() -> usize {
    500
}

fn default_step_tol() -> f64 {
    1e-12
}

impl Default for ExactSolverSettings {
    fn default() -> Self {
        Self {
            restarts: default_restarts(),
            iterations: default_iterations(),
            seed: 0,
            step_tolerance: default_step_tol(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactSolution {
    pub dist: ContextDistribution,
    pub mode: SolveMode,
    /// `false` when some block exhausted its iteration budget; the best
    /// feasible iterate is returned regardless.
    pub converged: bool,
    /// Exact sampled value of the result relative to the batch.
    pub value: f64,
    pub kl_step: f64,
}

/// The exact importance-weighted value `1/K sum V_k p(c_k) / p_i(c_k)` and its gradients.
struct SampledValue<'a> {
    batch: &'a RolloutBatch,
    values: Vec<f64>,
}

impl<'a> SampledValue<'a> {
    fn new(batch: &'a RolloutBatch) -> Self {
        Self {
            values: batch.values(),
            batch,
        }
    }

    /// Value and gradients with respect to `mu` and `theta`.
    fn eval(&self, mu: &[f64], theta: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let src = self.batch.source();
        let sigma = src.target().sigma_tilde_diag();
        let (mu0, th0) = (src.mu(), src.theta());
        let d = mu.len();
        let k = self.batch.len() as f64;
        let mut total = 0.0;
        let mut g_mu = vec![0.0; d];
        let mut g_th = vec![0.0; d];
        for (r, v) in self.batch.rollouts().iter().zip(&self.values) {
            let mut lr = 0.0;
            for j in 0..d {
                let c = r.context[j];
                lr += -0.5 * ((c - mu[j]).powi(2) / (sigma[j] * theta[j]) + theta[j].ln())
                    + 0.5 * ((c - mu0[j]).powi(2) / (sigma[j] * th0[j]) + th0[j].ln());
            }
            let w = v * lr.exp().clamp(RATIO_CLAMP.0, RATIO_CLAMP.1) / k;
            total += w;
            for j in 0..d {
                let diff = r.context[j] - mu[j];
                g_mu[j] += w * diff / (sigma[j] * theta[j]);
                g_th[j] += w * 0.5 * (diff * diff / (sigma[j] * theta[j] * theta[j]) - 1.0 / theta[j]);
            }
        }
        (total, g_mu, g_th)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Block {
    Mu,
    Theta,
}

/// Coordinates of one block around its center.
struct BlockGeometry {
    block: Block,
    center: Vec<f64>,
    /// `d param / d z`.
    jac: Vec<f64>,
    /// Lower bound on `z` (the `theta_min` floor); `-inf` for the mean.
    lower: Vec<f64>,
    eps: f64,
}

impl BlockGeometry {
    fn mu(dist: &ContextDistribution, eps: f64) -> Self {
        Self {
            block: Block::Mu,
            center: dist.mu().to_vec(),
            jac: dist.covariance().iter().map(|v| v.sqrt()).collect(),
            lower: vec![f64::NEG_INFINITY; dist.dim()],
            eps,
        }
    }

    fn theta(dist: &ContextDistribution, eps: f64, theta_min: f64) -> Self {
        let center = dist.theta().to_vec();
        Self {
            block: Block::Theta,
            jac: center.iter().map(|t| SQRT_2 * t).collect(),
            lower: center.iter().map(|t| ((theta_min / t - 1.0) / SQRT_2).min(0.0)).collect(),
            center,
            eps,
        }
    }

    fn param(&self, z: &[f64]) -> Vec<f64> {
        (0..z.len()).map(|j| self.center[j] + self.jac[j] * z[j]).collect()
    }

    fn to_z(&self, grad_param: &[f64]) -> Vec<f64> {
        grad_param.iter().zip(&self.jac).map(|(g, j)| g * j).collect()
    }

    fn kl(&self, z: &[f64]) -> f64 {
        match self.block {
            Block::Mu => 0.5 * dot(z, z),
            Block::Theta => theta_kl(&self.param(z), &self.center),
        }
    }

    /// Box clamp followed by radial bisection onto the exact KL ball. Both sets
    /// contain the origin and the KL grows along rays, so the result is feasible.
    fn project(&self, z: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = z.iter().zip(&self.lower).map(|(z, l)| z.max(*l)).collect();
        if self.kl(&z) <= self.eps {
            return z;
        }
        if self.block == Block::Mu {
            let s = (2.0 * self.eps).sqrt() / norm(&z);
            return z.iter().map(|x| x * s).collect();
        }
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            let zm: Vec<f64> = z.iter().map(|x| x * mid).collect();
            if self.kl(&zm) <= self.eps {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        z.iter().map(|x| x * lo).collect()
    }
}

type Eval<'a> = Box<dyn Fn(&[f64]) -> (f64, Vec<f64>) + 'a>;

/// A block problem `min f(z)` subject to `g(z) >= 0` and the geometry's ball.
struct BlockProblem<'a> {
    geom: BlockGeometry,
    f: Eval<'a>,
    g: Option<Eval<'a>>,
}

struct BlockResult {
    z: Vec<f64>,
    f: f64,
    converged: bool,
}

impl BlockProblem<'_> {
    fn feasible(&self, z: &[f64]) -> bool {
        self.g.as_ref().is_none_or(|g| g(z).0 >= 0.0)
    }

    fn descend(&self, start: Vec<f64>, settings: &ExactSolverSettings) -> BlockResult {
        let mut z = start;
        let (mut fz, mut grad) = (self.f)(&z);
        let mut step = 0.5 * (2.0 * self.geom.eps).sqrt();
        let mut converged = false;
        for _ in 0..settings.iterations {
            if step < settings.step_tolerance {
                converged = true;
                break;
            }
            let gn = norm(&grad);
            if gn == 0.0 {
                converged = true;
                break;
            }
            let dir: Vec<f64> = grad.iter().map(|g| -g / gn).collect();
            let mut accepted = None;
            for tangent in [false, true] {
                let d = if tangent {
                    match self.tangent_direction(&z, &dir) {
                        Some(d) => d,
                        None => break,
                    }
                } else {
                    dir.clone()
                };
                let trial = self.geom.project(&z.iter().zip(&d).map(|(z, d)| z + step * d).collect::<Vec<_>>());
                let trial = if tangent { self.restore(trial) } else { trial };
                if !self.feasible(&trial) {
                    continue;
                }
                let (ft, gt) = (self.f)(&trial);
                if ft < fz {
                    accepted = Some((trial, ft, gt));
                    break;
                }
                if !tangent {
                    // plain direction feasible but not improving: shrink
                    break;
                }
            }
            match accepted {
                Some((t, ft, gt)) => {
                    z = t;
                    fz = ft;
                    grad = gt;
                    step *= 1.5;
                }
                None => step *= 0.5,
            }
        }
        BlockResult { z, f: fz, converged }
    }

    /// Descent direction with the component that decreases `g` removed.
    fn tangent_direction(&self, z: &[f64], dir: &[f64]) -> Option<Vec<f64>> {
        let g = self.g.as_ref()?;
        let (_, gg) = g(z);
        let nn = dot(&gg, &gg);
        let along = dot(dir, &gg);
        if nn == 0.0 || along >= 0.0 {
            return None;
        }
        let t: Vec<f64> = dir.iter().zip(&gg).map(|(d, g)| d - along / nn * g).collect();
        let tn = norm(&t);
        (tn > 0.0).then(|| t.iter().map(|x| x / tn).collect())
    }

    /// Newton correction back onto `g >= 0` after a tangent move.
    fn restore(&self, mut z: Vec<f64>) -> Vec<f64> {
        let Some(g) = self.g.as_ref() else { return z };
        for _ in 0..3 {
            let (gv, gg) = g(&z);
            let nn = dot(&gg, &gg);
            if gv >= 0.0 || nn == 0.0 {
                break;
            }
            let s = -gv / nn * 1.000001;
            z = self.geom.project(&z.iter().zip(&gg).map(|(z, g)| z + s * g).collect::<Vec<_>>());
        }
        z
    }

    fn solve<R: Rng>(&self, settings: &ExactSolverSettings, rng: &mut R) -> BlockResult {
        let d = self.geom.center.len();
        let mut best = self.descend(vec![0.0; d], settings);
        let radius = (2.0 * self.geom.eps).sqrt();
        for _ in 1..settings.restarts {
            let mut start = None;
            for _ in 0..20 {
                let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let n = norm(&dir);
                if n == 0.0 {
                    continue;
                }
                let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
                let z = self.geom.project(&dir.iter().map(|x| x * r / n).collect::<Vec<_>>());
                if self.feasible(&z) {
                    start = Some(z);
                    break;
                }
            }
            let Some(start) = start else { continue };
            let res = self.descend(start, settings);
            if res.f < best.f {
                best = BlockResult {
                    converged: res.converged && best.converged,
                    ..res
                };
            } else {
                best.converged &= res.converged;
            }
        }
        best
    }
}

/// Best feasible solution of the exact (non-linearized) sampled subproblem.
pub fn solve_exact_sampled(
    batch: &RolloutBatch,
    dist: &ContextDistribution,
    config: &CurriculumConfig,
    mode: SolveMode,
    settings: &ExactSolverSettings,
) -> Result<ExactSolution> {
    config.validate()?;
    if batch.source() != dist {
        return Err(Error::DistributionMismatch);
    }
    if settings.restarts == 0 || settings.iterations == 0 {
        return Err(Error::Config("exact solver needs at least one restart and iteration".into()));
    }
    let eps = config.block_epsilon();
    let v_lower = config.v_lower;
    let value = SampledValue::new(batch);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let target = dist.target().clone();
    let (mu_i, theta_i) = (dist.mu().to_vec(), dist.theta().to_vec());
    let v_bar = value.eval(&mu_i, &theta_i).0;
    if mode == SolveMode::Convergence && v_bar < v_lower {
        return Err(Error::Infeasible(
            "current distribution violates the performance constraint".into(),
        ));
    }

    let mu_geom = BlockGeometry::mu(dist, eps);
    let theta_geom = BlockGeometry::theta(dist, eps, config.theta_min);

    let (mu_new, theta_new, converged) = match mode {
        SolveMode::Performance => {
            let mu_prob = BlockProblem {
                f: {
                    let (g, th) = (&mu_geom, &theta_i);
                    Box::new(|z: &[f64]| {
                        let (v, gm, _) = value.eval(&g.param(z), th);
                        (-v, g.to_z(&gm).iter().map(|x| -x).collect())
                    })
                },
                g: None,
                geom: BlockGeometry::mu(dist, eps),
            };
            let theta_prob = BlockProblem {
                f: {
                    let (g, mu) = (&theta_geom, &mu_i);
                    Box::new(|z: &[f64]| {
                        let (v, _, gt) = value.eval(mu, &g.param(z));
                        (-v, g.to_z(&gt).iter().map(|x| -x).collect())
                    })
                },
                g: None,
                geom: BlockGeometry::theta(dist, eps, config.theta_min),
            };
            let m = mu_prob.solve(settings, &mut rng);
            let t = theta_prob.solve(settings, &mut rng);
            (mu_geom.param(&m.z), theta_geom.param(&t.z), m.converged && t.converged)
        }
        SolveMode::Convergence => {
            let mu_prob = BlockProblem {
                f: {
                    let (g, th, tg) = (&mu_geom, &theta_i, &target);
                    Box::new(move |z: &[f64]| {
                        let mu = g.param(z);
                        let (mt, s) = (tg.mu_tilde(), tg.sigma_tilde_diag());
                        let mut f = 0.0;
                        let mut grad = vec![0.0; mu.len()];
                        for j in 0..mu.len() {
                            let diff = mu[j] - mt[j];
                            f += 0.5 * diff * diff / (s[j] * th[j]);
                            grad[j] = diff / (s[j] * th[j]);
                        }
                        (f, g.to_z(&grad))
                    })
                },
                g: Some({
                    let (g, th) = (&mu_geom, &theta_i);
                    Box::new(|z: &[f64]| {
                        let (v, gm, _) = value.eval(&g.param(z), th);
                        (v - v_lower, g.to_z(&gm))
                    })
                }),
                geom: BlockGeometry::mu(dist, eps),
            };
            let m = mu_prob.solve(settings, &mut rng);
            let mu_new = mu_geom.param(&m.z);
            let theta_prob = BlockProblem {
                f: {
                    let (g, mu, tg) = (&theta_geom, &mu_new, &target);
                    Box::new(move |z: &[f64]| {
                        let th = g.param(z);
                        let probe = ContextDistribution::new(mu.clone(), th.clone(), tg.clone());
                        let f = probe.map_or(f64::INFINITY, |p| p.kl_to_target());
                        (f, g.to_z(&kl_theta_gradient(mu, &th, tg)))
                    })
                },
                g: Some({
                    let (g, mu) = (&theta_geom, &mu_i);
                    Box::new(|z: &[f64]| {
                        let (v, _, gt) = value.eval(mu, &g.param(z));
                        (v - v_lower, g.to_z(&gt))
                    })
                }),
                geom: BlockGeometry::theta(dist, eps, config.theta_min),
            };
            let t = theta_prob.solve(settings, &mut rng);
            let converged = m.converged && t.converged;
            drop(theta_prob);
            (mu_new, theta_geom.param(&t.z), converged)
        }
    };

    let next = ContextDistribution::new(mu_new, theta_new, target)?;
    if !converged {
        log::warn!("exact sampled solver hit its iteration budget; returning best feasible iterate");
    }
    let (v, _, _) = value.eval(next.mu(), next.theta());
    Ok(ExactSolution {
        kl_step: next.kl_between(dist)?,
        dist: next,
        mode,
        converged,
        value: v,
    })
}

/// Mode picked by the same dispatch rule as the closed-form update.
pub fn dispatch_mode(batch: &RolloutBatch, dist: &ContextDistribution, config: &CurriculumConfig) -> Result<SolveMode> {
    let stats = compute_stats(batch, dist)?;
    Ok(if should_run_performance_step(&stats, config) {
        SolveMode::Performance
    } else {
        SolveMode::Convergence
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::TargetSpec;

    fn cfg(eps: f64, v_lower: f64) -> CurriculumConfig {
        CurriculumConfig {
            epsilon: eps,
            v_lower,
            split_budget: false,
            ..Default::default()
        }
    }

    #[test]
    fn flat_symmetric_batch_keeps_mean() {
        let target = TargetSpec::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let d = ContextDistribution::new(vec![0.5, -0.5], vec![1.0, 1.0], target).unwrap();
        let batch = RolloutBatch::from_values(
            vec![vec![0.5, -0.5].into(), vec![0.5, -0.5].into()],
            &[1.0, 1.0],
            d.clone(),
        )
        .unwrap();
        let sol = solve_exact_sampled(&batch, &d, &cfg(0.05, 5.0), SolveMode::Performance, &Default::default()).unwrap();
        for (a, b) in sol.dist.mu().iter().zip(d.mu()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!(sol.kl_step <= 0.05 * 2.0 + 1e-8);
    }

    #[test]
    fn theta_projection_is_feasible() {
        let target = TargetSpec::new(vec![0.0], vec![1.0]).unwrap();
        let d = ContextDistribution::new(vec![0.0], vec![2.0], target).unwrap();
        let g = BlockGeometry::theta(&d, 0.01, 1e-4);
        let z = g.project(&[-5.0]);
        assert!(g.kl(&z) <= 0.01 + 1e-12);
        assert!((g.kl(&z) - 0.01).abs() < 1e-9);
    }
}
