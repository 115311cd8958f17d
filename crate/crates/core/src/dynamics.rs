//! Continuous pendulum plant and a small deterministic gridworld.
//!
//! Angles are measured from the upright position, so gravity is destabilizing
//! at `theta = 0` and the hanging rest state is `theta = -pi`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Plant, TabularMDP, Transition};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumParams {
    /// kg
    pub mass: f64,
    /// m/s^2
    pub gravity: f64,
    /// m
    pub length: f64,
    /// integration step, s
    pub dt: f64,
    /// N*m
    pub torque_limit: f64,
    /// viscous damping, N*m*s/rad
    pub damping: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            gravity: 9.81,
            length: 1.0,
            dt: 0.05,
            torque_limit: 2.0,
            damping: 0.0,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("gravity", self.gravity),
            ("length", self.length),
            ("dt", self.dt),
            ("torque_limit", self.torque_limit),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "pendulum.{name} must be > 0, got {v}"
                )));
            }
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(Error::config(format!(
                "pendulum.damping must be >= 0, got {}",
                self.damping
            )));
        }
        Ok(())
    }

    /// Energy of the upright rest state, `m * g * l`.
    pub fn desired_energy(&self) -> f64 {
        self.mass * self.gravity * self.length
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut w = theta - two_pi * ((theta + PI) / two_pi).floor();
    // rounding can land exactly on +pi
    if w >= PI {
        w -= two_pi;
    }
    if w < -PI {
        w = -PI;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendState {
    pub theta: f64,
    pub theta_dot: f64,
}

impl PendState {
    pub fn new(theta: f64, theta_dot: f64) -> Self {
        Self {
            theta: wrap_angle(theta),
            theta_dot,
        }
    }

    pub fn hanging() -> Self {
        Self::new(-PI, 0.0)
    }

    pub fn upright() -> Self {
        Self::new(0.0, 0.0)
    }

    pub fn from_coords(c: &[f64]) -> Self {
        Self::new(c[0], c[1])
    }
}

/// One semi-implicit Euler step of the torque-driven pendulum.
pub fn step_pendulum(s: PendState, torque: f64, p: &PendulumParams) -> Result<PendState> {
    if !(torque.abs() <= p.torque_limit) {
        return Err(Error::domain(format!(
            "torque {torque} outside +/-{} N*m",
            p.torque_limit
        )));
    }
    let ml2 = p.mass * p.length * p.length;
    let accel =
        (torque - p.damping * s.theta_dot + p.mass * p.gravity * p.length * s.theta.sin()) / ml2;
    let theta_dot = s.theta_dot + p.dt * accel;
    let theta = wrap_angle(s.theta + p.dt * theta_dot);
    Ok(PendState { theta, theta_dot })
}

/// Total mechanical energy with the potential zero at the pivot height.
pub fn energy(s: PendState, p: &PendulumParams) -> f64 {
    let ml = p.mass * p.length;
    0.5 * ml * p.length * s.theta_dot * s.theta_dot + ml * p.gravity * s.theta.cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    /// `[x, y]`
    pub goal: [usize; 2],
    pub goal_reward: f64,
    pub step_reward: f64,
}

/// Gridworld moves, in action-index order.
pub const GRID_MOVES: [(i64, i64); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];

impl GridworldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::config(format!(
                "gridworld must be at least 2x2, got {}x{}",
                self.width, self.height
            )));
        }
        if self.goal[0] >= self.width || self.goal[1] >= self.height {
            return Err(Error::config(format!(
                "goal {:?} outside the {}x{} grid",
                self.goal, self.width, self.height
            )));
        }
        if !self.goal_reward.is_finite() || !self.step_reward.is_finite() {
            return Err(Error::config("gridworld rewards must be finite"));
        }
        Ok(())
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn cell(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    pub fn goal_index(&self) -> usize {
        self.index(self.goal[0], self.goal[1])
    }

    pub fn manhattan_to_goal(&self, index: usize) -> usize {
        let (x, y) = self.cell(index);
        x.abs_diff(self.goal[0]) + y.abs_diff(self.goal[1])
    }
}

/// Deterministic 4-action gridworld (N, E, S, W). Walls reflect, the goal absorbs.
pub fn build_gridworld(spec: &GridworldSpec) -> Result<TabularMDP> {
    spec.validate()?;
    let n = spec.width * spec.height;
    let goal = spec.goal_index();
    let mut rows = Vec::with_capacity(n * 4);
    let mut rewards = Vec::with_capacity(n * 4);
    let mut coords = Vec::with_capacity(n * 2);
    for s in 0..n {
        let (x, y) = spec.cell(s);
        coords.extend([x as f64, y as f64]);
        for (dx, dy) in GRID_MOVES {
            let next = if s == goal {
                s
            } else {
                let nx = x as i64 + dx;
                let ny = y as i64 + dy;
                if nx < 0 || ny < 0 || nx >= spec.width as i64 || ny >= spec.height as i64 {
                    s
                } else {
                    spec.index(nx as usize, ny as usize)
                }
            };
            let r = if s == goal {
                0.0
            } else if next == goal {
                spec.goal_reward
            } else {
                spec.step_reward
            };
            rows.push(vec![Transition { next, prob: 1.0 }]);
            rewards.push(vec![r]);
        }
    }
    let terminal = (0..n).map(|s| s == goal).collect();
    TabularMDP::from_rows(
        4,
        2,
        coords,
        rows,
        Some(rewards),
        terminal,
        Plant::Gridworld(*spec),
    )
}
