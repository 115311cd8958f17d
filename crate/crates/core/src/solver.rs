//! Exact tabular solvers: Q-value iteration, policy evaluation and seeded
//! one-step Q-learning.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMDP;
use crate::shaping::{RewardModel, RewardSpec};

/// Largest MDP that [`policy_evaluation`] solves with a dense LU factorization.
pub const DIRECT_SOLVE_MAX_STATES: usize = 1000;
pub const EVAL_TOL: f64 = 1e-10;
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    /// Row-major `n_states x n_actions`.
    pub values: Vec<f64>,
}

impl QTable {
    pub fn filled(n_states: usize, n_actions: usize, gamma: f64, fill: f64) -> Self {
        Self {
            n_states,
            n_actions,
            gamma,
            values: vec![fill; n_states * n_actions],
        }
    }

    /// `Q(s, a) = phi(s)` for every action.
    pub fn from_state_values(state_values: &[f64], n_actions: usize, gamma: f64) -> Self {
        Self {
            n_states: state_values.len(),
            n_actions,
            gamma,
            values: state_values
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, n_actions))
                .collect(),
        }
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// `max_a Q(s, a)` per state.
    pub fn state_values(&self) -> Vec<f64> {
        self.values
            .chunks(self.n_actions)
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    pub fn greedy(&self, s: usize) -> usize {
        argmax(self.row(s))
    }
}

/// Lowest index of the maximum.
#[inline]
/// Lowest index whose value lies within `eps` of the row maximum.
pub fn argmax_within(row: &[f64], eps: f64) -> usize {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    row.iter().position(|&v| v >= m - eps).unwrap_or(0)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub greedy_action: Vec<usize>,
    pub tie_sets: Vec<Vec<usize>>,
}

impl Policy {
    pub fn n_states(&self) -> usize {
        self.greedy_action.len()
    }

    /// A policy given only by its actions; each tie set is the action itself.
    pub fn from_actions(actions: Vec<usize>) -> Self {
        let tie_sets = actions.iter().map(|&a| vec![a]).collect();
        Self {
            greedy_action: actions,
            tie_sets,
        }
    }
}

pub fn extract_policy(q: &QTable, tie_eps: f64) -> Policy {
    let (greedy_action, tie_sets) = (0..q.n_states)
        .map(|s| {
            let row = q.row(s);
            let best = argmax(row);
            let cut = row[best] - tie_eps;
            let ties = (0..row.len()).filter(|&a| row[a] >= cut).collect();
            (best, ties)
        })
        .unzip();
    Policy {
        greedy_action,
        tie_sets,
    }
}

/// `A(s, a) = Q(s, a) - max_a' Q(s, a')`, row-major like the Q-table.
pub fn advantage(q: &QTable) -> Vec<f64> {
    q.values
        .chunks(q.n_actions)
        .flat_map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter().map(move |v| v - m)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// max |Q_{t+1} - Q_t| after each sweep
    pub residual_history: Vec<f64>,
    pub converged: bool,
    /// seconds
    pub wall_time: f64,
}

impl SolveReport {
    pub fn final_residual(&self) -> f64 {
        *self.residual_history.last().unwrap_or(&f64::INFINITY)
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::domain(format!(
            "discount must lie in [0, 1), got {gamma}"
        )));
    }
    Ok(())
}

/// Synchronous Bellman-optimality sweeps over the Q-table.
#[derive(Debug, Clone)]
pub struct QValueIteration {
    pub gamma: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub init: Option<QTable>,
}

impl QValueIteration {
    pub fn new(gamma: f64) -> Self {
        Self {
            gamma,
            tolerance: DEFAULT_TOL,
            max_iterations: DEFAULT_MAX_ITER,
            init: None,
        }
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }

    pub fn with_init(mut self, q: QTable) -> Self {
        self.init = Some(q);
        self
    }

    pub fn solve(&self, mdp: &TabularMDP, model: &RewardModel) -> Result<(QTable, SolveReport)> {
        check_gamma(self.gamma)?;
        if !(self.tolerance > 0.0) {
            return Err(Error::domain("tolerance must be > 0"));
        }
        if self.max_iterations == 0 {
            return Err(Error::domain("max_iterations must be >= 1"));
        }
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        if model.expected.len() != ns * na {
            return Err(Error::domain(
                "reward model was compiled for a different MDP",
            ));
        }
        let start = Instant::now();
        let mut q = match &self.init {
            Some(init) => {
                if init.n_states != ns || init.n_actions != na {
                    return Err(Error::domain(
                        "initial Q-table shape does not match the MDP",
                    ));
                }
                init.values.clone()
            }
            None => vec![0.0; ns * na],
        };
        let mut next = vec![0.0; ns * na];
        let mut v = vec![0.0; ns];
        let mut history = Vec::new();
        let gamma = self.gamma;
        let mut converged = false;
        for _ in 0..self.max_iterations {
            v.par_iter_mut()
                .with_min_len(1024)
                .zip(q.par_chunks(na).with_min_len(1024))
                .for_each(|(v, row)| *v = row.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            next.par_chunks_mut(na)
                .with_min_len(256)
                .enumerate()
                .for_each(|(s, out)| {
                    for (a, o) in out.iter_mut().enumerate() {
                        let future: f64 = mdp.row(s, a).iter().map(|t| t.prob * v[t.next]).sum();
                        *o = model.expected(s, a) + gamma * future;
                    }
                });
            let residual = q
                .par_iter()
                .with_min_len(4096)
                .zip(next.par_iter().with_min_len(4096))
                .map(|(a, b)| (a - b).abs())
                .reduce(|| 0.0, f64::max);
            std::mem::swap(&mut q, &mut next);
            history.push(residual);
            if residual < self.tolerance {
                converged = true;
                break;
            }
        }
        let report = SolveReport {
            iterations: history.len(),
            residual_history: history,
            converged,
            wall_time: start.elapsed().as_secs_f64(),
        };
        Ok((
            QTable {
                n_states: ns,
                n_actions: na,
                gamma,
                values: q,
            },
            report,
        ))
    }
}

pub fn q_value_iteration(
    mdp: &TabularMDP,
    rewards: &RewardSpec,
    gamma: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(QTable, SolveReport)> {
    let model = RewardModel::compile(rewards, mdp, gamma)?;
    QValueIteration::new(gamma)
        .with_tolerance(tol)
        .with_max_iterations(max_iter)
        .solve(mdp, &model)
}

/// Value of a deterministic policy: solves `V = r_pi + gamma * T_pi * V`.
///
/// Small MDPs use a dense LU solve; larger ones iterate to [`EVAL_TOL`].
pub fn policy_evaluation(
    mdp: &TabularMDP,
    model: &RewardModel,
    actions: &[usize],
    gamma: f64,
) -> Result<Vec<f64>> {
    if mdp.n_states() <= DIRECT_SOLVE_MAX_STATES {
        policy_evaluation_direct(mdp, model, actions, gamma)
    } else {
        policy_evaluation_iterative(mdp, model, actions, gamma, EVAL_TOL)
    }
}

fn check_policy(mdp: &TabularMDP, actions: &[usize]) -> Result<()> {
    if actions.len() != mdp.n_states() {
        return Err(Error::domain(format!(
            "policy covers {} states, MDP has {}",
            actions.len(),
            mdp.n_states()
        )));
    }
    if let Some(a) = actions.iter().find(|&&a| a >= mdp.n_actions()) {
        return Err(Error::domain(format!("policy action {a} out of range")));
    }
    Ok(())
}

pub fn policy_evaluation_direct(
    mdp: &TabularMDP,
    model: &RewardModel,
    actions: &[usize],
    gamma: f64,
) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    check_policy(mdp, actions)?;
    let n = mdp.n_states();
    let mut a_mat = DMatrix::<f64>::identity(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for s in 0..n {
        let a = actions[s];
        b[s] = model.expected(s, a);
        for t in mdp.row(s, a) {
            a_mat[(s, t.next)] -= gamma * t.prob;
        }
    }
    let v = a_mat
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::domain("policy evaluation system is singular"))?;
    Ok(v.iter().copied().collect())
}

pub fn policy_evaluation_iterative(
    mdp: &TabularMDP,
    model: &RewardModel,
    actions: &[usize],
    gamma: f64,
    tol: f64,
) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    check_policy(mdp, actions)?;
    let n = mdp.n_states();
    let mut v = vec![0.0; n];
    let mut next = vec![0.0; n];
    for _ in 0..DEFAULT_MAX_ITER * 10 {
        next.par_iter_mut()
            .with_min_len(1024)
            .enumerate()
            .for_each(|(s, out)| {
                let a = actions[s];
                let future: f64 = mdp.row(s, a).iter().map(|t| t.prob * v[t.next]).sum();
                *out = model.expected(s, a) + gamma * future;
            });
        let delta = v
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut v, &mut next);
        if delta < tol {
            return Ok(v);
        }
    }
    Err(Error::NotConverged {
        iterations: DEFAULT_MAX_ITER * 10,
        residual: f64::NAN,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QLearningConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Episodes restart from a random state after this many steps.
    pub max_episode_len: usize,
    /// Greedy steps take the lowest action within this much of the row max.
    #[serde(default = "default_greedy_tie_eps")]
    pub tie_eps: f64,
}

pub const GREEDY_TIE_EPS: f64 = 1e-9;

fn default_greedy_tie_eps() -> f64 {
    GREEDY_TIE_EPS
}

impl Default for QLearningConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            alpha: 0.1,
            epsilon: 0.1,
            seed: 0,
            max_episode_len: 200,
            tie_eps: GREEDY_TIE_EPS,
        }
    }
}

impl QLearningConfig {
    fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::domain(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::domain(format!(
                "epsilon must lie in [0, 1], got {}",
                self.epsilon
            )));
        }
        if self.max_episode_len == 0 {
            return Err(Error::domain("max_episode_len must be >= 1"));
        }
        if !(self.tie_eps >= 0.0) {
            return Err(Error::domain("tie_eps must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub state: usize,
    pub action: usize,
    pub next: usize,
    pub reward: f64,
}

/// One-step epsilon-greedy Q-learning driven by a single seeded generator.
///
/// Per step the generator is consumed in a fixed order: exploration coin,
/// exploratory action (only when exploring), successor draw, and a start-state
/// draw whenever an episode restarts.
pub struct QLearner<'a> {
    mdp: &'a TabularMDP,
    model: &'a RewardModel,
    cfg: QLearningConfig,
    q: QTable,
    rng: ChaCha8Rng,
    state: usize,
    episode_step: usize,
    starts: Vec<usize>,
}

impl<'a> QLearner<'a> {
    pub fn new(
        mdp: &'a TabularMDP,
        model: &'a RewardModel,
        init: QTable,
        cfg: QLearningConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if init.n_states != mdp.n_states() || init.n_actions != mdp.n_actions() {
            return Err(Error::domain(
                "initial Q-table shape does not match the MDP",
            ));
        }
        let mut starts: Vec<usize> = (0..mdp.n_states())
            .filter(|&s| !mdp.is_terminal(s))
            .collect();
        if starts.is_empty() {
            starts = (0..mdp.n_states()).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let state = starts[rng.random_range(0..starts.len())];
        Ok(Self {
            mdp,
            model,
            cfg,
            q: QTable {
                gamma: cfg.gamma,
                ..init
            },
            rng,
            state,
            episode_step: 0,
            starts,
        })
    }

    pub fn q(&self) -> &QTable {
        &self.q
    }

    pub fn into_q(self) -> QTable {
        self.q
    }

    pub fn step(&mut self) -> Visit {
        let s = self.state;
        let na = self.mdp.n_actions();
        let action = if self.rng.random::<f64>() < self.cfg.epsilon {
            self.rng.random_range(0..na)
        } else {
            argmax_within(self.q.row(s), self.cfg.tie_eps)
        };
        let range = self.mdp.row_range(s, action);
        let row = &self.mdp.entries()[range.clone()];
        let u: f64 = self.rng.random();
        let mut k = row.len() - 1;
        let mut acc = 0.0;
        for (i, t) in row.iter().enumerate() {
            acc += t.prob;
            if u < acc {
                k = i;
                break;
            }
        }
        let next = row[k].next;
        let reward = self.model.entry_rewards[range.start + k];

        let best_next = self
            .q
            .row(next)
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let target = reward + self.cfg.gamma * best_next;
        let idx = s * na + action;
        self.q.values[idx] += self.cfg.alpha * (target - self.q.values[idx]);

        self.episode_step += 1;
        if self.mdp.is_terminal(next) || self.episode_step >= self.cfg.max_episode_len {
            self.state = self.starts[self.rng.random_range(0..self.starts.len())];
            self.episode_step = 0;
        } else {
            self.state = next;
        }
        Visit {
            state: s,
            action,
            next,
            reward,
        }
    }
}

pub fn tabular_q_learning(
    mdp: &TabularMDP,
    model: &RewardModel,
    init: QTable,
    steps: usize,
    cfg: QLearningConfig,
) -> Result<(QTable, Vec<Visit>)> {
    let mut learner = QLearner::new(mdp, model, init, cfg)?;
    let trace = (0..steps).map(|_| learner.step()).collect();
    Ok((learner.into_q(), trace))
}
