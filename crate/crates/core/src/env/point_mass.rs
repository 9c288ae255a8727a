//! A point mass that has to pass a gate in a wall to reach a goal.
//!
//! The context is `[gate_position, gate_width, friction]`. The mass starts at
//! `start` above the wall `y = 0` and must reach `goal` below it.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{EnvState, Environment, StepOutcome};
use crate::error::{Error, Result};

pub const MIN_GATE_WIDTH: f64 = 0.05;

fn d_start() -> [f64; 2] {
    [0.0, 3.0]
}
fn d_goal() -> [f64; 2] {
    [0.0, -3.0]
}
fn d_half_extent() -> f64 {
    4.0
}
fn d_dt() -> f64 {
    0.05
}
fn d_horizon() -> usize {
    100
}
fn d_max_action() -> f64 {
    10.0
}
fn d_action_cost() -> f64 {
    1e-3
}
fn d_success_radius() -> f64 {
    0.25
}
fn d_success_bonus() -> f64 {
    10.0
}
fn d_crash_penalty() -> f64 {
    1.0
}
fn d_velocity_scale() -> f64 {
    5.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointMassParams {
    #[serde(default = "d_start")]
    pub start: [f64; 2],
    #[serde(default = "d_goal")]
    pub goal: [f64; 2],
    /// The arena is `[-half_extent, half_extent]^2`.
    #[serde(default = "d_half_extent")]
    pub half_extent: f64,
    #[serde(default = "d_dt")]
    pub dt: f64,
    #[serde(default = "d_horizon")]
    pub horizon: usize,
    #[serde(default = "d_max_action")]
    pub max_action: f64,
    #[serde(default = "d_action_cost")]
    pub action_cost: f64,
    #[serde(default = "d_success_radius")]
    pub success_radius: f64,
    #[serde(default = "d_success_bonus")]
    pub success_bonus: f64,
    /// Subtracted from the reward of the step that hits the wall.
    #[serde(default = "d_crash_penalty")]
    pub crash_penalty: f64,
    /// Velocity normalization for observations.
    #[serde(default = "d_velocity_scale")]
    pub velocity_scale: f64,
}

impl Default for PointMassParams {
    fn default() -> Self {
        toml::Value::Table(Default::default()).try_into().expect("defaults are valid")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMassContext {
    pub gate_position: f64,
    pub gate_width: f64,
    pub friction: f64,
}

impl PointMassContext {
    /// Clamp to physical bounds; the flag reports whether anything changed.
    pub fn sanitize(c: &[f64]) -> Result<(Self, bool)> {
        Error::check_dim(3, c.len())?;
        let raw = Self {
            gate_position: c[0],
            gate_width: c[1],
            friction: c[2],
        };
        let clean = Self {
            gate_position: if raw.gate_position.is_finite() { raw.gate_position } else { 0.0 },
            gate_width: if raw.gate_width.is_finite() { raw.gate_width.max(MIN_GATE_WIDTH) } else { MIN_GATE_WIDTH },
            friction: if raw.friction.is_finite() { raw.friction.max(0.0) } else { 0.0 },
        };
        Ok((clean, clean != raw))
    }
}

pub struct PointMass {
    params: PointMassParams,
    warned: AtomicBool,
}

impl PointMass {
    pub fn new(params: PointMassParams) -> Result<Self> {
        let p = &params;
        if !(p.dt > 0.0 && p.half_extent > 0.0 && p.max_action > 0.0 && p.success_radius > 0.0) {
            return Err(Error::Config("point_mass: dt, half_extent, max_action, success_radius must be > 0".into()));
        }
        if p.horizon == 0 || p.action_cost < 0.0 || p.crash_penalty < 0.0 || p.velocity_scale <= 0.0 {
            return Err(Error::Config("point_mass: invalid horizon, costs or velocity scale".into()));
        }
        let inside = |q: [f64; 2]| q.iter().all(|x| x.abs() <= p.half_extent);
        if !inside(p.start) || !inside(p.goal) || p.start[1] <= 0.0 || p.goal[1] >= 0.0 {
            return Err(Error::Config("point_mass: start must lie above and goal below the wall, inside the arena".into()));
        }
        Ok(Self {
            params,
            warned: AtomicBool::new(false),
        })
    }

    pub fn params(&self) -> &PointMassParams {
        &self.params
    }

    fn distance_to_goal(&self, p: [f64; 2]) -> f64 {
        ((p[0] - self.params.goal[0]).powi(2) + (p[1] - self.params.goal[1]).powi(2)).sqrt()
    }
}

impl Environment for PointMass {
    fn name(&self) -> &'static str {
        "point_mass"
    }

    fn context_dim(&self) -> usize {
        3
    }

    fn observation_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.params.horizon
    }

    fn reward_bounds(&self) -> (f64, f64) {
        let p = &self.params;
        let max_cost = p.action_cost * 2.0 * p.max_action * p.max_action;
        (-max_cost - p.crash_penalty, 1.0 + p.success_bonus)
    }

    fn reset(&self, context: &[f64], _rng: &mut dyn RngCore) -> Result<EnvState> {
        let (_, clamped) = PointMassContext::sanitize(context)?;
        if clamped {
            // once per instance; wide curricula clamp routinely
            if !self.warned.swap(true, Ordering::Relaxed) {
                log::warn!("point_mass: context {context:?} clamped to physical bounds");
            } else {
                log::debug!("point_mass: context {context:?} clamped to physical bounds");
            }
        }
        Ok(EnvState {
            position: self.params.start,
            velocity: [0.0, 0.0],
            time_step: 0,
        })
    }

    fn step(&self, state: &EnvState, action: &[f64], context: &[f64]) -> StepOutcome {
        let p = &self.params;
        let ctx = PointMassContext::sanitize(context)
            .map(|(c, _)| c)
            .unwrap_or(PointMassContext {
                gate_position: 0.0,
                gate_width: MIN_GATE_WIDTH,
                friction: 0.0,
            });
        let mut a = [0.0; 2];
        for (j, slot) in a.iter_mut().enumerate() {
            let v = action.get(j).copied().unwrap_or(0.0);
            *slot = if v.is_finite() { v.clamp(-p.max_action, p.max_action) } else { 0.0 };
        }

        let old = state.position;
        let mut vel = state.velocity;
        let mut pos = old;
        for j in 0..2 {
            vel[j] += p.dt * (a[j] - ctx.friction * vel[j]);
            pos[j] += p.dt * vel[j];
            if pos[j].abs() > p.half_extent {
                pos[j] = pos[j].clamp(-p.half_extent, p.half_extent);
                vel[j] = 0.0;
            }
        }
        let next = EnvState {
            position: pos,
            velocity: vel,
            time_step: state.time_step + 1,
        };
        let action_cost = p.action_cost * (a[0] * a[0] + a[1] * a[1]);

        // the segment old -> pos crosses or touches the wall line y = 0
        let crosses = (old[1] > 0.0 && pos[1] <= 0.0) || (old[1] < 0.0 && pos[1] >= 0.0);
        if crosses {
            let t = old[1] / (old[1] - pos[1]);
            let x_cross = old[0] + t * (pos[0] - old[0]);
            if (x_cross - ctx.gate_position).abs() >= 0.5 * ctx.gate_width {
                return StepOutcome {
                    state: next,
                    reward: -p.crash_penalty - action_cost,
                    terminated: true,
                    success: false,
                };
            }
        }

        let dist = self.distance_to_goal(pos);
        let mut reward = (-dist).exp() - action_cost;
        let success = dist < p.success_radius;
        if success {
            reward += p.success_bonus;
        }
        StepOutcome {
            state: next,
            reward,
            terminated: success || state.time_step + 1 >= p.horizon,
            success,
        }
    }

    fn observe(&self, state: &EnvState) -> Vec<f64> {
        let (h, v) = (self.params.half_extent, self.params.velocity_scale);
        vec![
            state.position[0] / h,
            state.position[1] / h,
            state.velocity[0] / v,
            state.velocity[1] / v,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn env() -> PointMass {
        PointMass::new(PointMassParams::default()).unwrap()
    }

    #[test]
    fn reset_is_fixed_and_validates() {
        let e = env();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = e.reset(&[2.5, 0.7, 0.1], &mut rng).unwrap();
        assert_eq!(s.position, [0.0, 3.0]);
        assert_eq!(s.velocity, [0.0, 0.0]);
        assert_eq!(s, e.reset(&[-3.0, 2.0, 1.0], &mut rng).unwrap());
        assert!(e.reset(&[0.0, 1.0], &mut rng).is_err());
    }

    #[test]
    fn context_clamping() {
        let (c, clamped) = PointMassContext::sanitize(&[0.0, -1.0, -0.5]).unwrap();
        assert!(clamped);
        assert_eq!(c.gate_width, MIN_GATE_WIDTH);
        assert_eq!(c.friction, 0.0);
        assert!(!PointMassContext::sanitize(&[1.0, 1.0, 0.0]).unwrap().1);
    }

    #[test]
    fn frictionless_coasting_keeps_velocity() {
        let e = env();
        let s = EnvState {
            position: [0.0, 2.0],
            velocity: [0.3, -0.2],
            time_step: 0,
        };
        let out = e.step(&s, &[0.0, 0.0], &[0.0, 1.0, 0.0]);
        assert_eq!(out.state.velocity, [0.3, -0.2]);
        assert!((out.state.position[0] - 0.015).abs() < 1e-15);
    }

    #[test]
    fn friction_never_adds_energy() {
        let e = env();
        let mut s = EnvState {
            position: [0.0, 2.0],
            velocity: [3.0, 1.0],
            time_step: 0,
        };
        for _ in 0..20 {
            let out = e.step(&s, &[0.0, 0.0], &[0.0, 1.0, 0.8]);
            let n = |v: [f64; 2]| v[0].hypot(v[1]);
            assert!(n(out.state.velocity) <= n(s.velocity));
            s = out.state;
        }
    }

    #[test]
    fn passing_through_the_gate() {
        let e = env();
        let s = EnvState {
            position: [1.0, 0.01],
            velocity: [0.0, -1.0],
            time_step: 5,
        };
        let out = e.step(&s, &[0.0, 0.0], &[1.0, 0.5, 0.0]);
        assert!(!out.terminated);
        assert!(out.state.position[1] < 0.0);
    }

    #[test]
    fn crashing_outside_the_gate() {
        let e = env();
        let s = EnvState {
            position: [1.0, 0.01],
            velocity: [0.0, -1.0],
            time_step: 5,
        };
        let out = e.step(&s, &[0.0, 0.0], &[-1.0, 0.5, 0.0]);
        assert!(out.terminated && !out.success);
        assert!(out.reward <= -1.0);
    }

    #[test]
    fn reaching_the_goal() {
        let e = env();
        let s = EnvState {
            position: [0.0, -2.9],
            velocity: [0.0, 0.0],
            time_step: 10,
        };
        let out = e.step(&s, &[0.0, 0.0], &[0.0, 1.0, 0.0]);
        assert!(out.success && out.terminated);
        assert!((out.reward - (10.0 + (-0.1f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn arena_walls_stop_motion() {
        let e = env();
        let s = EnvState {
            position: [3.99, 2.0],
            velocity: [2.0, 0.0],
            time_step: 0,
        };
        let out = e.step(&s, &[10.0, 0.0], &[0.0, 1.0, 0.0]);
        assert_eq!(out.state.position[0], 4.0);
        assert_eq!(out.state.velocity[0], 0.0);
    }

    #[test]
    fn horizon_terminates() {
        let e = env();
        let s = EnvState {
            position: [0.0, 2.0],
            velocity: [0.0, 0.0],
            time_step: 99,
        };
        let out = e.step(&s, &[0.0, 0.0], &[0.0, 1.0, 0.0]);
        assert!(out.terminated && !out.success);
    }
}
