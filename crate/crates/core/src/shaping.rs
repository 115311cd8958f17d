//! Reward library: the sparse swing-up reward, potential functions, and their
//! composition into direct (DRS) or potential-based (PBRS) shaping terms.
//!
//! A DRS term pays `w * phi(s)`. A PBRS term pays `w * (g * phi(s') - phi(s))`
//! where `g` is the term's own discount, which defaults to the solver discount.

use serde::{Deserialize, Serialize};

use crate::dynamics::{energy, PendState};
use crate::error::{Error, Result};
use crate::mdp::{Plant, TabularMDP};

/// Reward paid inside the upright target region.
pub const SPARSE_REWARD: f64 = 10.0;
/// Target region half-widths, inclusive.
pub const TARGET_THETA: f64 = 0.05;
pub const TARGET_THETA_DOT: f64 = 0.1;

pub fn in_target_region(s: PendState) -> bool {
    s.theta.abs() <= TARGET_THETA && s.theta_dot.abs() <= TARGET_THETA_DOT
}

pub fn sparse_pendulum_reward(s: PendState) -> f64 {
    if in_target_region(s) {
        SPARSE_REWARD
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialFn {
    /// `(E(s) - k * m * g * l)^2`
    EnergyError {
        target_multiplier: f64,
    },
    /// `exp(-|x - center|^2 / sigma)`
    SquaredExponential {
        center: Vec<f64>,
        sigma: f64,
    },
    Table {
        values: Vec<f64>,
    },
    Constant {
        value: f64,
    },
}

impl PotentialFn {
    pub fn validate(&self) -> Result<()> {
        match self {
            PotentialFn::EnergyError { target_multiplier } if !target_multiplier.is_finite() => {
                Err(Error::config(
                    "energy_error.target_multiplier must be finite",
                ))
            }
            PotentialFn::SquaredExponential { sigma, center } => {
                if !(*sigma > 0.0) {
                    Err(Error::config(format!(
                        "squared_exponential.sigma must be > 0, got {sigma}"
                    )))
                } else if center.iter().any(|c| !c.is_finite()) {
                    Err(Error::config("squared_exponential.center must be finite"))
                } else {
                    Ok(())
                }
            }
            PotentialFn::Table { values } if values.iter().any(|v| !v.is_finite()) => {
                Err(Error::config("table potential values must be finite"))
            }
            PotentialFn::Constant { value } if !value.is_finite() => {
                Err(Error::config("constant potential must be finite"))
            }
            _ => Ok(()),
        }
    }
}

/// A state as seen by a potential: its tabular index and continuous coordinates.
#[derive(Debug, Clone, Copy)]
pub struct StateRef<'a> {
    pub index: usize,
    pub coords: &'a [f64],
}

impl<'a> StateRef<'a> {
    pub fn of(mdp: &'a TabularMDP, index: usize) -> Self {
        Self {
            index,
            coords: mdp.coords(index),
        }
    }
}

pub fn potential_value(phi: &PotentialFn, s: StateRef<'_>, plant: &Plant) -> Result<f64> {
    match phi {
        PotentialFn::EnergyError { target_multiplier } => {
            let Plant::Pendulum(p) = plant else {
                return Err(Error::domain(
                    "energy_error potential needs a pendulum plant",
                ));
            };
            if s.coords.len() != 2 {
                return Err(Error::domain(
                    "energy_error potential needs (theta, theta_dot) coordinates",
                ));
            }
            let e = energy(PendState::from_coords(s.coords), p);
            let err = e - target_multiplier * p.desired_energy();
            Ok(err * err)
        }
        PotentialFn::SquaredExponential { center, sigma } => {
            if center.len() != s.coords.len() {
                return Err(Error::domain(format!(
                    "squared_exponential center has {} dims, state has {}",
                    center.len(),
                    s.coords.len()
                )));
            }
            let d2: f64 = s
                .coords
                .iter()
                .zip(center)
                .map(|(x, c)| (x - c) * (x - c))
                .sum();
            Ok((-d2 / sigma).exp())
        }
        PotentialFn::Table { values } => values.get(s.index).copied().ok_or_else(|| {
            Error::domain(format!(
                "table potential has {} entries, state index {}",
                values.len(),
                s.index
            ))
        }),
        PotentialFn::Constant { value } => Ok(*value),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapingMode {
    #[default]
    Drs,
    Pbrs,
}

impl std::fmt::Display for ShapingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShapingMode::Drs => "drs",
            ShapingMode::Pbrs => "pbrs",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapingTerm {
    #[serde(default)]
    pub name: Option<String>,
    pub potential: PotentialFn,
    pub weight: f64,
    pub mode: ShapingMode,
    /// Discount inside the PBRS difference. `None` uses the solver discount.
    #[serde(default)]
    pub pbrs_gamma: Option<f64>,
}

impl ShapingTerm {
    pub fn drs(potential: PotentialFn, weight: f64) -> Self {
        Self {
            name: None,
            potential,
            weight,
            mode: ShapingMode::Drs,
            pbrs_gamma: None,
        }
    }

    pub fn pbrs(potential: PotentialFn, weight: f64) -> Self {
        Self {
            mode: ShapingMode::Pbrs,
            ..Self::drs(potential, weight)
        }
    }

    pub fn with_pbrs_gamma(mut self, g: f64) -> Self {
        self.pbrs_gamma = Some(g);
        self
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn label(&self, position: usize) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("term{position}_{}", self.mode))
    }

    pub fn effective_gamma(&self, solver_gamma: f64) -> f64 {
        self.pbrs_gamma.unwrap_or(solver_gamma)
    }

    pub fn validate(&self) -> Result<()> {
        self.potential.validate()?;
        if !self.weight.is_finite() {
            return Err(Error::config("shaping term weight must be finite"));
        }
        if let Some(g) = self.pbrs_gamma {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::config(format!(
                    "pbrs_gamma must lie in [0, 1], got {g}"
                )));
            }
        }
        Ok(())
    }

    /// Term value from the potentials of the departure and arrival states.
    #[inline]
    pub fn value_from_potentials(&self, phi_s: f64, phi_next: f64, solver_gamma: f64) -> f64 {
        match self.mode {
            ShapingMode::Drs => self.weight * phi_s,
            ShapingMode::Pbrs => {
                self.weight * (self.effective_gamma(solver_gamma) * phi_next - phi_s)
            }
        }
    }
}

pub fn shaping_reward(
    term: &ShapingTerm,
    s: StateRef<'_>,
    s_next: StateRef<'_>,
    plant: &Plant,
    solver_gamma: f64,
) -> Result<f64> {
    let phi_s = potential_value(&term.potential, s, plant)?;
    let phi_next = match term.mode {
        ShapingMode::Drs => 0.0,
        ShapingMode::Pbrs => potential_value(&term.potential, s_next, plant)?,
    };
    Ok(term.value_from_potentials(phi_s, phi_next, solver_gamma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseReward {
    PendulumSparse,
    /// The reward stored with the MDP itself (gridworld, random MDPs).
    #[serde(alias = "gridworld_native")]
    Native,
    /// Per-state reward table.
    Table {
        values: Vec<f64>,
    },
    Zero,
}

/// Which end of a transition the base reward is evaluated at.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardTiming {
    #[default]
    Arrival,
    Departure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub base: BaseReward,
    #[serde(default)]
    pub base_timing: RewardTiming,
    #[serde(default)]
    pub terms: Vec<ShapingTerm>,
}

impl RewardSpec {
    pub fn base_only(base: BaseReward) -> Self {
        Self {
            base,
            base_timing: RewardTiming::Arrival,
            terms: Vec::new(),
        }
    }

    pub fn with_term(mut self, term: ShapingTerm) -> Self {
        self.terms.push(term);
        self
    }

    /// The same spec with every shaping term removed.
    pub fn baseline(&self) -> Self {
        Self {
            terms: Vec::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let BaseReward::Table { values } = &self.base {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::config("base reward table must be finite"));
            }
        }
        for (i, t) in self.terms.iter().enumerate() {
            t.validate()
                .map_err(|e| Error::config(format!("rewards.terms[{i}]: {e}")))?;
        }
        Ok(())
    }
}

fn base_reward_at(
    base: &BaseReward,
    mdp: &TabularMDP,
    timing: RewardTiming,
    s: usize,
    s_next: usize,
    native: impl FnOnce() -> Result<f64>,
) -> Result<f64> {
    let at = match timing {
        RewardTiming::Arrival => s_next,
        RewardTiming::Departure => s,
    };
    match base {
        BaseReward::PendulumSparse => {
            let c = mdp.coords(at);
            if c.len() != 2 {
                return Err(Error::domain(
                    "pendulum_sparse reward needs (theta, theta_dot) coordinates",
                ));
            }
            Ok(sparse_pendulum_reward(PendState::from_coords(c)))
        }
        BaseReward::Native => native(),
        BaseReward::Table { values } => values
            .get(at)
            .copied()
            .ok_or_else(|| Error::domain(format!("base reward table has no entry for state {at}"))),
        BaseReward::Zero => Ok(0.0),
    }
}

/// Reward of a single transition, evaluated directly from the spec.
pub fn total_reward(
    spec: &RewardSpec,
    mdp: &TabularMDP,
    solver_gamma: f64,
    s: usize,
    a: usize,
    s_next: usize,
) -> Result<f64> {
    let n = mdp.n_states();
    if s >= n || s_next >= n || a >= mdp.n_actions() {
        return Err(Error::domain(format!(
            "transition (s={s}, a={a}, s'={s_next}) out of range for {n} states x {} actions",
            mdp.n_actions()
        )));
    }
    let native = || {
        let k = mdp
            .row(s, a)
            .iter()
            .position(|t| t.next == s_next)
            .ok_or_else(|| {
                Error::domain(format!("s'={s_next} is not a successor of (s={s}, a={a})"))
            })?;
        mdp.native_reward(s, a, k)
            .ok_or_else(|| Error::domain("MDP carries no native reward"))
    };
    let mut r = base_reward_at(&spec.base, mdp, spec.base_timing, s, s_next, native)?;
    for term in &spec.terms {
        r += shaping_reward(
            term,
            StateRef::of(mdp, s),
            StateRef::of(mdp, s_next),
            mdp.plant(),
            solver_gamma,
        )?;
    }
    Ok(r)
}

/// Rewards of a spec tabulated against one MDP.
///
/// `entry_rewards` is aligned with [`TabularMDP::entries`]; `expected` holds
/// the one-step expected reward of every `(s, a)`.
#[derive(Debug, Clone)]
pub struct RewardModel {
    pub gamma: f64,
    pub entry_rewards: Vec<f64>,
    pub expected: Vec<f64>,
    pub n_actions: usize,
    terms: Vec<ShapingTerm>,
    /// Per term, the potential of every state.
    potentials: Vec<Vec<f64>>,
}

impl RewardModel {
    pub fn compile(spec: &RewardSpec, mdp: &TabularMDP, solver_gamma: f64) -> Result<Self> {
        spec.validate()?;
        let n = mdp.n_states();
        if let BaseReward::Native = spec.base {
            if !mdp.has_native_rewards() {
                return Err(Error::domain(
                    "native base reward requested but the MDP carries none",
                ));
            }
        }
        let potentials = spec
            .terms
            .iter()
            .map(|t| {
                (0..n)
                    .map(|s| potential_value(&t.potential, StateRef::of(mdp, s), mdp.plant()))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        // base reward per state; native rewards are read per entry
        let base_state: Option<Vec<f64>> = match &spec.base {
            BaseReward::Native => None,
            base => Some(
                (0..n)
                    .map(|s| base_reward_at(base, mdp, RewardTiming::Arrival, s, s, || Ok(0.0)))
                    .collect::<Result<_>>()?,
            ),
        };
        let native = mdp.native_rewards();
        let na = mdp.n_actions();
        let mut entry_rewards = Vec::with_capacity(mdp.entries().len());
        let mut expected = Vec::with_capacity(n * na);
        for s in 0..n {
            for a in 0..na {
                let range = mdp.row_range(s, a);
                let mut acc = 0.0;
                for (k, t) in mdp.entries()[range.clone()].iter().enumerate() {
                    let mut r = match (&base_state, native) {
                        (Some(b), _) => match spec.base_timing {
                            RewardTiming::Arrival => b[t.next],
                            RewardTiming::Departure => b[s],
                        },
                        (None, Some(nr)) => nr[range.start + k],
                        (None, None) => unreachable!(),
                    };
                    for (term, phi) in spec.terms.iter().zip(&potentials) {
                        r += term.value_from_potentials(phi[s], phi[t.next], solver_gamma);
                    }
                    if !r.is_finite() {
                        return Err(Error::NonFiniteReward {
                            state: s,
                            action: a,
                            next: t.next,
                            value: r,
                        });
                    }
                    acc += t.prob * r;
                    entry_rewards.push(r);
                }
                expected.push(acc);
            }
        }
        Ok(Self {
            gamma: solver_gamma,
            entry_rewards,
            expected,
            n_actions: na,
            terms: spec.terms.clone(),
            potentials,
        })
    }

    #[inline]
    pub fn expected(&self, s: usize, a: usize) -> f64 {
        self.expected[s * self.n_actions + a]
    }

    pub fn terms(&self) -> &[ShapingTerm] {
        &self.terms
    }

    pub fn potentials(&self, term: usize) -> &[f64] {
        &self.potentials[term]
    }

    /// Value of shaping term `term` on the transition `s -> s_next`.
    #[inline]
    pub fn term_value(&self, term: usize, s: usize, s_next: usize) -> f64 {
        let phi = &self.potentials[term];
        self.terms[term].value_from_potentials(phi[s], phi[s_next], self.gamma)
    }
}
