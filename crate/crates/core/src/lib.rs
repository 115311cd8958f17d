//! Tabular reward-shaping laboratory.
//!
//! Builds finite MDPs from a torque-limited pendulum (or a small gridworld),
//! composes sparse task rewards with direct and potential-based shaping terms,
//! solves them exactly, and measures how much the shaping moves the optimal
//! policy.

// `!(x > 0.0)` style checks are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod mdp;
pub mod shaping;
pub mod solver;
pub mod tabulation;

pub use error::{Error, Result};
pub use mdp::{Plant, TabularMDP, Transition};
