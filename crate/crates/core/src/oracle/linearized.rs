//! Generic solver for the (at most two-constraint) linearized block problems:
//!
//! ```text
//! min_x   <q, x> + kappa/2 ||x||^2_M
//! s.t.    offset + <g, x> >= 0          (optional performance constraint)
//!         ||x||^2_M <= radius           (trust region around the current iterate)
//! ```
//!
//! `x` is the displacement of one parameter block and `M` a positive diagonal
//! metric. Multipliers follow the Lagrangian
//! `L = obj - lp (offset + <g, x>) + lb/2 (||x||^2_M - radius)`, so that
//! `x = M^{-1}(lp g - q) / (kappa + lb)`. The solution is found by nested
//! bisection on the dual variables and never touches the closed forms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecops::{dot, norm_inf, wnorm_sq};

/// Bracket for every dual bisection.
pub const DUAL_BRACKET: (f64, f64) = (1e-12, 1e12);
pub const DUAL_MAX_ITER: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// Mean block, radius `2 eps` in the `Sigma^{-1}` metric.
    KlBallMu,
    /// Covariance-scale block, radius `4 eps` in the `H` metric.
    KlBallTheta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerformanceConstraint {
    pub gradient: Vec<f64>,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearizedSubproblem {
    pub kind: ConstraintKind,
    pub objective_gradient: Vec<f64>,
    /// Curvature `kappa >= 0` of the objective in the metric; zero for linear objectives.
    pub objective_curvature: f64,
    pub metric: Vec<f64>,
    pub radius: f64,
    pub performance: Option<PerformanceConstraint>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub performance: f64,
    pub ball: f64,
}

/// Scaled KKT residuals; all are dimensionless and zero at an exact solution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }

    pub fn worst(a: Self, b: Self) -> Self {
        Self {
            stationarity: a.stationarity.max(b.stationarity),
            primal: a.primal.max(b.primal),
            dual: a.dual.max(b.dual),
            complementarity: a.complementarity.max(b.complementarity),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericSolution {
    pub step: Vec<f64>,
    pub multipliers: Multipliers,
    pub residuals: KktResiduals,
}

impl LinearizedSubproblem {
    pub fn dim(&self) -> usize {
        self.metric.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        Error::check_dim(d, self.objective_gradient.len())?;
        if let Some(p) = &self.performance {
            Error::check_dim(d, p.gradient.len())?;
        }
        if self.metric.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return Err(Error::InvalidParameter("metric must be positive definite".into()));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::InvalidParameter(format!("radius {} must be > 0", self.radius)));
        }
        if !(self.objective_curvature >= 0.0) {
            return Err(Error::InvalidParameter("objective curvature must be >= 0".into()));
        }
        Ok(())
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        dot(&self.objective_gradient, x) + 0.5 * self.objective_curvature * wnorm_sq(x, &self.metric)
    }

    fn performance_value(&self, x: &[f64]) -> f64 {
        self.performance
            .as_ref()
            .map_or(f64::INFINITY, |p| p.offset + dot(&p.gradient, x))
    }

    /// Scaled KKT residuals of `(x, multipliers)`.
    pub fn kkt_residuals(&self, x: &[f64], m: Multipliers) -> KktResiduals {
        let mx: Vec<f64> = x.iter().zip(&self.metric).map(|(x, m)| x * m).collect();
        let (g, offset) = match &self.performance {
            Some(p) => (p.gradient.clone(), p.offset),
            None => (vec![0.0; self.dim()], 0.0),
        };
        let kappa = self.objective_curvature;
        let grad_l: Vec<f64> = (0..self.dim())
            .map(|j| self.objective_gradient[j] + (kappa + m.ball) * mx[j] - m.performance * g[j])
            .collect();
        let s_scale = 1.0
            + norm_inf(&self.objective_gradient)
            + (kappa + m.ball.abs()) * norm_inf(&mx)
            + m.performance.abs() * norm_inf(&g);
        let stationarity = norm_inf(&grad_l) / s_scale;

        let ball = wnorm_sq(x, &self.metric) - self.radius;
        let gx = dot(&g, x);
        let h = offset + gx;
        let h_scale = 1.0_f64.max(offset.abs() + gx.abs());
        let mut primal = ball.max(0.0) / self.radius;
        if self.performance.is_some() {
            primal = primal.max((-h).max(0.0) / h_scale);
        }
        let dual = (-m.performance).max(-m.ball).max(0.0);
        let comp_ball = (m.ball * ball).abs() / (m.ball.abs().max(1.0) * self.radius);
        let comp_perf = if self.performance.is_some() {
            (m.performance * h).abs() / (m.performance.abs().max(1.0) * h_scale)
        } else {
            m.performance.abs()
        };
        KktResiduals {
            stationarity,
            primal,
            dual,
            complementarity: comp_ball.max(comp_perf),
        }
    }

    /// Minimizer of the Lagrangian over the ball for a fixed performance multiplier.
    fn inner(&self, lp: f64) -> (Vec<f64>, f64) {
        let g = self.performance.as_ref().map(|p| p.gradient.as_slice());
        let v: Vec<f64> = (0..self.dim())
            .map(|j| (lp * g.map_or(0.0, |g| g[j]) - self.objective_gradient[j]) / self.metric[j])
            .collect();
        let vn = wnorm_sq(&v, &self.metric);
        let kappa = self.objective_curvature;
        if vn == 0.0 {
            return (vec![0.0; self.dim()], 0.0);
        }
        if kappa > 0.0 && vn / (kappa * kappa) <= self.radius {
            return (v.iter().map(|x| x / kappa).collect(), 0.0);
        }
        // ||v||^2 / (kappa + lb)^2 - radius is decreasing in lb
        let excess = |lb: f64| vn / ((kappa + lb) * (kappa + lb)) - self.radius;
        let (mut lo, mut hi) = DUAL_BRACKET;
        if excess(lo) <= 0.0 {
            // gradient too small to resolve inside the bracket
            return (vec![0.0; self.dim()], 0.0);
        }
        if excess(hi) > 0.0 {
            lo = hi;
        } else {
            for _ in 0..DUAL_MAX_ITER {
                let mid = if hi / lo > 4.0 { (lo * hi).sqrt() } else { 0.5 * (lo + hi) };
                if mid <= lo || mid >= hi {
                    break;
                }
                if excess(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
        // take the endpoint closest to the root
        let lb = if excess(hi).abs() <= excess(lo).abs() { hi } else { lo };
        (v.iter().map(|x| x / (kappa + lb)).collect(), lb)
    }

    /// KKT-certified solution by dual bisection.
    pub fn solve_numeric(&self) -> Result<NumericSolution> {
        self.validate()?;
        let finish = |x: Vec<f64>, lp: f64, lb: f64| {
            let multipliers = Multipliers {
                performance: lp,
                ball: lb,
            };
            let residuals = self.kkt_residuals(&x, multipliers);
            Ok(NumericSolution {
                step: x,
                multipliers,
                residuals,
            })
        };

        let (x0, lb0) = self.inner(0.0);
        let Some(perf) = &self.performance else {
            return finish(x0, 0.0, lb0);
        };
        if self.performance_value(&x0) >= 0.0 {
            return finish(x0, 0.0, lb0);
        }
        let reach = (self.radius * wnorm_sq(&perf.gradient, &self.metric.iter().map(|m| 1.0 / m).collect::<Vec<_>>()))
            .sqrt();
        if perf.offset + reach < 0.0 {
            return Err(Error::Infeasible(format!(
                "performance half-space misses the trust region (best attainable {:.3e})",
                perf.offset + reach
            )));
        }

        // the constraint value along the dual path is nondecreasing in lp
        let h = |lp: f64| self.performance_value(&self.inner(lp).0);
        let mut hi = DUAL_BRACKET.0;
        while h(hi) < 0.0 && hi < DUAL_BRACKET.1 {
            hi *= 10.0;
        }
        let mut lo = 0.0;
        for _ in 0..DUAL_MAX_ITER {
            let mid = if lo > 0.0 && hi / lo > 4.0 {
                (lo * hi).sqrt()
            } else {
                0.5 * (lo + hi)
            };
            if mid <= lo || mid >= hi {
                break;
            }
            if h(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (x_hi, lb_hi) = self.inner(hi);
        let h_hi = self.performance_value(&x_hi);
        let tol = 1e-12 * (1.0 + perf.offset.abs());
        if self.objective_curvature == 0.0 && h_hi > tol {
            // q parallel to g: the primal path jumps across the hyperplane at the
            // root, where every point of the segment between the two sides is optimal
            let (x_lo, lb_lo) = self.inner(lo);
            let h_lo = self.performance_value(&x_lo);
            if h_lo < 0.0 {
                let s = -h_lo / (h_hi - h_lo);
                let x: Vec<f64> = x_lo.iter().zip(&x_hi).map(|(a, b)| a + s * (b - a)).collect();
                let lp = lo + s * (hi - lo);
                let lb = if wnorm_sq(&x, &self.metric) < self.radius * (1.0 - 1e-9) {
                    0.0
                } else {
                    lb_lo + s * (lb_hi - lb_lo)
                };
                return finish(x, lp, lb);
            }
        }
        finish(x_hi, hi, lb_hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecops::{norm, scale};

    fn ball(q: Vec<f64>, metric: Vec<f64>, radius: f64) -> LinearizedSubproblem {
        LinearizedSubproblem {
            kind: ConstraintKind::KlBallMu,
            objective_gradient: q,
            objective_curvature: 0.0,
            metric,
            radius,
            performance: None,
        }
    }

    #[test]
    fn linear_objective_on_ball() {
        let metric = vec![2.0, 0.5, 4.0];
        let g = vec![1.0, -2.0, 0.5];
        let p = ball(scale(&g, -1.0), metric.clone(), 0.3);
        let sol = p.solve_numeric().unwrap();
        // expected: center + step of metric-norm sqrt(r) along M^{-1} g
        let dir: Vec<f64> = g.iter().zip(&metric).map(|(g, m)| g / m).collect();
        let len = wnorm_sq(&dir, &metric).sqrt();
        let expect: Vec<f64> = dir.iter().map(|d| d * 0.3f64.sqrt() / len).collect();
        for (a, b) in sol.step.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(sol.residuals.max() < 1e-10, "{:?}", sol.residuals);
    }

    #[test]
    fn zero_gradient_returns_center() {
        let p = ball(vec![0.0, 0.0], vec![1.0, 1.0], 1.0);
        let sol = p.solve_numeric().unwrap();
        assert_eq!(norm(&sol.step), 0.0);
        assert!(sol.residuals.max() < 1e-12);
    }

    #[test]
    fn proximal_objective_inside_ball() {
        // min 1/2 ||x - a||^2 with a inside the ball: x = a
        let a = vec![0.1, -0.2];
        let p = LinearizedSubproblem {
            objective_gradient: scale(&a, -1.0),
            objective_curvature: 1.0,
            ..ball(vec![], vec![1.0, 1.0], 1.0)
        };
        let sol = p.solve_numeric().unwrap();
        assert!((sol.step[0] - 0.1).abs() < 1e-15 && (sol.step[1] + 0.2).abs() < 1e-15);
        assert_eq!(sol.multipliers.ball, 0.0);
    }

    #[test]
    fn infeasible_half_space_is_reported() {
        let p = LinearizedSubproblem {
            performance: Some(PerformanceConstraint {
                gradient: vec![1.0],
                offset: -5.0,
            }),
            ..ball(vec![1.0], vec![1.0], 1.0)
        };
        assert!(matches!(p.solve_numeric(), Err(Error::Infeasible(_))));
    }

    #[test]
    fn both_constraints_active_certificate() {
        // minimize x0 subject to x1 >= 0.5 on the unit ball
        let p = LinearizedSubproblem {
            performance: Some(PerformanceConstraint {
                gradient: vec![0.0, 1.0],
                offset: -0.5,
            }),
            ..ball(vec![1.0, 0.0], vec![1.0, 1.0], 1.0)
        };
        let sol = p.solve_numeric().unwrap();
        assert!((sol.step[1] - 0.5).abs() < 1e-12);
        assert!((sol.step[0] + 0.75f64.sqrt()).abs() < 1e-12);
        assert!(sol.residuals.max() < 1e-10, "{:?}", sol.residuals);
        assert!(sol.multipliers.performance > 0.0 && sol.multipliers.ball > 0.0);
    }
}
