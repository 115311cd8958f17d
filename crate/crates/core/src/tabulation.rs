//! Discretization of the continuous pendulum into a [`TabularMDP`].
//!
//! Successor states are spread over the enclosing grid cell with multilinear
//! weights, which become the transition probabilities.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{step_pendulum, PendState, PendulumParams};
use crate::error::{Error, Result};
use crate::mdp::{renormalize, Plant, TabularMDP, Transition};

pub const DEFAULT_MAX_STATES: usize = 10_000_000;

/// Interpolation weights below this are dropped (and the row renormalized).
const WEIGHT_SNAP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimSpec {
    pub min: f64,
    pub max: f64,
    pub count: usize,
    #[serde(default)]
    pub periodic: bool,
}

impl DimSpec {
    /// Spacing between neighbouring nodes.
    pub fn step(&self) -> f64 {
        if self.periodic {
            (self.max - self.min) / self.count as f64
        } else {
            (self.max - self.min) / (self.count - 1) as f64
        }
    }

    pub fn node(&self, i: usize) -> f64 {
        if self.periodic {
            self.min + (self.max - self.min) * i as f64 / self.count as f64
        } else {
            self.min + (self.max - self.min) * i as f64 / (self.count - 1) as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.node(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionGrid {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl ActionGrid {
    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.min];
        }
        (0..self.count)
            .map(|i| self.min + (self.max - self.min) * i as f64 / (self.count - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dims: Vec<DimSpec>,
    pub actions: ActionGrid,
    #[serde(default = "default_max_states")]
    pub max_states: usize,
}

fn default_max_states() -> usize {
    DEFAULT_MAX_STATES
}

impl Default for GridSpec {
    /// theta: 101 periodic nodes on [-pi, pi); theta_dot: 101 nodes on [-8, 8];
    /// torque: 21 actions on [-2, 2].
    fn default() -> Self {
        Self {
            dims: vec![
                DimSpec {
                    min: -PI,
                    max: PI,
                    count: 101,
                    periodic: true,
                },
                DimSpec {
                    min: -8.0,
                    max: 8.0,
                    count: 101,
                    periodic: false,
                },
            ],
            actions: ActionGrid {
                min: -2.0,
                max: 2.0,
                count: 21,
            },
            max_states: DEFAULT_MAX_STATES,
        }
    }
}

impl GridSpec {
    pub fn pendulum(n_theta: usize, n_theta_dot: usize, n_actions: usize) -> Self {
        let mut g = Self::default();
        g.dims[0].count = n_theta;
        g.dims[1].count = n_theta_dot;
        g.actions.count = n_actions;
        g
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::config("grid needs at least one dimension"));
        }
        for (i, d) in self.dims.iter().enumerate() {
            if d.count < 2 {
                return Err(Error::config(format!("grid.dims[{i}].count must be >= 2")));
            }
            if !(d.min < d.max) || !d.min.is_finite() || !d.max.is_finite() {
                return Err(Error::config(format!(
                    "grid.dims[{i}] needs finite min < max, got [{}, {}]",
                    d.min, d.max
                )));
            }
        }
        let a = &self.actions;
        if a.count == 0 {
            return Err(Error::config("grid.actions.count must be positive"));
        }
        if !(a.min <= a.max) || (a.count > 1 && a.min == a.max) {
            return Err(Error::config("grid.actions needs min < max"));
        }
        Ok(())
    }
}

/// Row-major index <-> coordinate mapping over the Cartesian product of the grid axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dims: Vec<DimSpec>,
    strides: Vec<usize>,
    n_states: usize,
}

pub fn build_grid(spec: &GridSpec) -> Result<Grid> {
    spec.validate()?;
    let mut n: usize = 1;
    for d in &spec.dims {
        n = n
            .checked_mul(d.count)
            .filter(|&n| n <= spec.max_states)
            .ok_or_else(|| {
                Error::config(format!(
                    "grid has more than the allowed {} states",
                    spec.max_states
                ))
            })?;
    }
    let mut strides = vec![1; spec.dims.len()];
    for k in (0..spec.dims.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * spec.dims[k + 1].count;
    }
    Ok(Grid {
        dims: spec.dims.clone(),
        strides,
        n_states: n,
    })
}

impl Grid {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn dims(&self) -> &[DimSpec] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn multi_index(&self, mut index: usize) -> Vec<usize> {
        self.strides
            .iter()
            .map(|&s| {
                let i = index / s;
                index %= s;
                i
            })
            .collect()
    }

    pub fn coords(&self, index: usize) -> Vec<f64> {
        self.multi_index(index)
            .into_iter()
            .zip(&self.dims)
            .map(|(i, d)| d.node(i))
            .collect()
    }

    /// Flat coordinate array, `ndim` values per state.
    pub fn all_coords(&self) -> Vec<f64> {
        (0..self.n_states).flat_map(|s| self.coords(s)).collect()
    }

    /// Clamps the non-periodic coordinates of `x` into their axis bounds.
    pub fn clamp(&self, x: &mut [f64]) {
        for (v, d) in x.iter_mut().zip(&self.dims) {
            if !d.periodic {
                *v = v.clamp(d.min, d.max);
            }
        }
    }

    /// Multilinear weights of `x` over the nodes of its enclosing cell.
    ///
    /// Non-periodic coordinates must already lie inside their bounds.
    pub fn interp_weights(&self, x: &[f64]) -> Vec<(usize, f64)> {
        // per axis: up to two (node, weight) pairs
        let axes: Vec<[(usize, f64); 2]> = x
            .iter()
            .zip(&self.dims)
            .map(|(&v, d)| axis_weights(v, d))
            .collect();
        let mut out = vec![(0usize, 1.0f64)];
        for (k, pair) in axes.iter().enumerate() {
            let mut next = Vec::with_capacity(out.len() * 2);
            for &(idx, w) in &out {
                for &(node, wk) in pair {
                    if wk > 0.0 {
                        next.push((idx + node * self.strides[k], w * wk));
                    }
                }
            }
            out = next;
        }
        out
    }

    /// The node carrying the largest interpolation weight; ties go to the lowest index.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let w = self.interp_weights(x);
        let mut best = w[0];
        for &(i, v) in &w[1..] {
            if v > best.1 || (v == best.1 && i < best.0) {
                best = (i, v);
            }
        }
        best.0
    }
}

fn axis_weights(v: f64, d: &DimSpec) -> [(usize, f64); 2] {
    let h = d.step();
    let n = d.count;
    let (lo, t) = if d.periodic {
        let span = d.max - d.min;
        let u = ((v - d.min).rem_euclid(span)) / h;
        let lo = (u.floor() as usize).min(n - 1);
        (lo, u - lo as f64)
    } else {
        let u = ((v - d.min) / h).clamp(0.0, (n - 1) as f64);
        let lo = (u.floor() as usize).min(n - 2);
        (lo, u - lo as f64)
    };
    let hi = if d.periodic { (lo + 1) % n } else { lo + 1 };
    let t = if t < WEIGHT_SNAP {
        0.0
    } else if t > 1.0 - WEIGHT_SNAP {
        1.0
    } else {
        t
    };
    [(lo, 1.0 - t), (hi, t)]
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpMode {
    #[default]
    Multilinear,
    Nearest,
}

/// Tabulates the pendulum: one integration step per (grid node, torque),
/// with the successor spread over the grid.
///
/// The grid must have exactly two axes, `theta` then `theta_dot`.
pub fn tabulate_pendulum(
    p: &PendulumParams,
    spec: &GridSpec,
    mode: InterpMode,
) -> Result<TabularMDP> {
    p.validate()?;
    let grid = build_grid(spec)?;
    if grid.ndim() != 2 {
        return Err(Error::config(format!(
            "pendulum grid needs 2 dimensions (theta, theta_dot), got {}",
            grid.ndim()
        )));
    }
    let torques = spec.actions.values();
    if let Some(t) = torques.iter().find(|t| t.abs() > p.torque_limit) {
        return Err(Error::config(format!(
            "action grid value {t} exceeds the torque limit {}",
            p.torque_limit
        )));
    }
    let n_actions = torques.len();
    let rows: Vec<Vec<Transition>> = (0..grid.n_states() * n_actions)
        .into_par_iter()
        .map(|k| {
            let (s, a) = (k / n_actions, k % n_actions);
            let c = grid.coords(s);
            let next = step_pendulum(PendState::new(c[0], c[1]), torques[a], p)?;
            let mut x = [next.theta, next.theta_dot];
            grid.clamp(&mut x);
            let mut row: Vec<Transition> = match mode {
                InterpMode::Multilinear => grid
                    .interp_weights(&x)
                    .into_iter()
                    .map(|(next, prob)| Transition { next, prob })
                    .collect(),
                InterpMode::Nearest => vec![Transition {
                    next: grid.nearest(&x),
                    prob: 1.0,
                }],
            };
            row.sort_by_key(|t| t.next);
            renormalize(&mut row);
            Ok(row)
        })
        .collect::<Result<_>>()?;
    TabularMDP::from_rows(
        n_actions,
        2,
        grid.all_coords(),
        rows,
        None,
        vec![false; grid.n_states()],
        Plant::Pendulum(*p),
    )
}

/// Content hash of everything that determines a tabulated pendulum MDP.
pub fn cache_key(p: &PendulumParams, spec: &GridSpec, mode: InterpMode) -> String {
    let payload = serde_json::json!({
        "format": 1,
        "params": p,
        "grid": spec,
        "mode": mode,
    });
    let digest = Sha256::digest(payload.to_string().as_bytes());
    hex::encode(digest)
}
