//! Experiments built on the solvers: policy agreement, shaping invariance
//! checks, weight sweeps, rollout statistics of shaping terms, and a
//! brute-force oracle for small MDPs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{step_pendulum, PendState, PendulumParams};
use crate::error::{Error, Result};
use crate::mdp::TabularMDP;
use crate::shaping::{
    in_target_region, PotentialFn, RewardModel, RewardSpec, ShapingMode, ShapingTerm,
};
use crate::solver::{
    advantage, argmax, extract_policy, policy_evaluation, Policy, QTable, QValueIteration,
    SolveReport, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::tabulation::Grid;

pub const DEFAULT_TIE_EPS: f64 = 1e-6;
pub const IDENTITY_TOL: f64 = 1e-8;
pub const DEFAULT_MULTIPLIERS: [f64; 7] = [0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0];
pub const HISTOGRAM_BINS: usize = 64;
/// Largest number of deterministic policies [`brute_force_solve`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub gamma: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub tie_eps: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            tie_eps: DEFAULT_TIE_EPS,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config(format!(
                "solver.gamma must lie in [0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config("solver.tol must be > 0"));
        }
        if self.max_iter == 0 {
            return Err(Error::config("solver.max_iter must be >= 1"));
        }
        if !(self.tie_eps >= 0.0) {
            return Err(Error::config("solver.tie_eps must be >= 0"));
        }
        Ok(())
    }
}

/// A solved reward spec together with its greedy policy's baseline value.
#[derive(Debug, Clone)]
pub struct Solution {
    pub q: QTable,
    pub policy: Policy,
    /// Value of the greedy policy under the baseline reward.
    pub baseline_values: Vec<f64>,
    pub report: SolveReport,
}

/// Solves `rewards` and evaluates the greedy policy under `baseline`.
pub fn solve_and_evaluate(
    mdp: &TabularMDP,
    rewards: &RewardSpec,
    baseline: &RewardModel,
    settings: &SolverSettings,
) -> Result<Solution> {
    let model = RewardModel::compile(rewards, mdp, settings.gamma)?;
    let (q, report) = QValueIteration::new(settings.gamma)
        .with_tolerance(settings.tol)
        .with_max_iterations(settings.max_iter)
        .solve(mdp, &model)?;
    let policy = extract_policy(&q, settings.tie_eps);
    let baseline_values = policy_evaluation(mdp, baseline, &policy.greedy_action, settings.gamma)?;
    Ok(Solution {
        q,
        policy,
        baseline_values,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// Fraction of states with identical greedy actions.
    pub exact_agreement: f64,
    /// Fraction of states whose reference action lies in the candidate's tie set.
    pub tie_aware_agreement: f64,
    /// Mean over states of `V_ref(s) - V_candidate(s)` under the baseline reward.
    pub value_regret: f64,
}

pub fn compare_policies(
    reference: (&Policy, &[f64]),
    candidate: (&QTable, &Policy),
    mdp: &TabularMDP,
    baseline: &RewardModel,
    gamma: f64,
    tie_eps: f64,
) -> Result<AgreementReport> {
    let (ref_policy, ref_values) = reference;
    let (cand_q, cand_policy) = candidate;
    let n = mdp.n_states();
    if ref_policy.n_states() != n
        || ref_values.len() != n
        || cand_policy.n_states() != n
        || cand_q.n_states != n
        || cand_q.n_actions != mdp.n_actions()
    {
        return Err(Error::domain(
            "policies, values and MDP disagree on the number of states",
        ));
    }
    let ties = extract_policy(cand_q, tie_eps);
    let mut exact = 0usize;
    let mut tie_aware = 0usize;
    for s in 0..n {
        let a = ref_policy.greedy_action[s];
        if cand_policy.greedy_action[s] == a {
            exact += 1;
        }
        if ties.tie_sets[s].contains(&a) {
            tie_aware += 1;
        }
    }
    let cand_values = policy_evaluation(mdp, baseline, &cand_policy.greedy_action, gamma)?;
    let regret = ref_values
        .iter()
        .zip(&cand_values)
        .map(|(r, c)| r - c)
        .sum::<f64>()
        / n as f64;
    Ok(AgreementReport {
        exact_agreement: exact as f64 / n as f64,
        tie_aware_agreement: tie_aware as f64 / n as f64,
        value_regret: regret,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub gamma: f64,
    /// max |V_shaped + phi - V_base|
    pub max_value_offset_dev: f64,
    /// max |Q_shaped + phi - Q_base|
    pub max_q_offset_dev: f64,
    /// max |A_shaped - A_base|
    pub max_advantage_dev: f64,
    pub tie_set_mismatches: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Solves `base` with and without a unit-weight PBRS term built from `phi`
/// (discounted with `gamma`) and checks the value offset, advantage and
/// tie-set identities.
pub fn invariance_suite(
    mdp: &TabularMDP,
    base: &RewardSpec,
    phi: &PotentialFn,
    gamma: f64,
) -> Result<InvarianceReport> {
    let shaped_spec = base
        .clone()
        .with_term(ShapingTerm::pbrs(phi.clone(), 1.0).with_pbrs_gamma(gamma));
    let base_model = RewardModel::compile(base, mdp, gamma)?;
    let shaped_model = RewardModel::compile(&shaped_spec, mdp, gamma)?;
    let potential = shaped_model
        .potentials(shaped_spec.terms.len() - 1)
        .to_vec();

    // Solve to a fixed-point error of IDENTITY_TOL / 100; the floor keeps the
    // stopping rule above the rounding noise of large Q-values.
    let scale = shaped_model
        .expected
        .iter()
        .chain(&base_model.expected)
        .fold(0.0f64, |m, r| m.max(r.abs()))
        / (1.0 - gamma)
        + potential.iter().fold(0.0f64, |m, p| m.max(p.abs()));
    let tol = (IDENTITY_TOL * 1e-2 * (1.0 - gamma)).max(16.0 * f64::EPSILON * scale.max(1.0));
    let solver = QValueIteration::new(gamma)
        .with_tolerance(tol)
        .with_max_iterations(DEFAULT_MAX_ITER * 10);
    let (q_base, _) = solver.solve(mdp, &base_model)?;
    let (q_shaped, _) = solver.solve(mdp, &shaped_model)?;

    let na = mdp.n_actions();
    let max_q_offset_dev = q_shaped
        .values
        .iter()
        .zip(&q_base.values)
        .enumerate()
        .map(|(k, (qs, qb))| (qs + potential[k / na] - qb).abs())
        .fold(0.0, f64::max);
    let max_value_offset_dev = q_shaped
        .state_values()
        .iter()
        .zip(q_base.state_values())
        .zip(&potential)
        .map(|((vs, vb), p)| (vs + p - vb).abs())
        .fold(0.0, f64::max);
    let max_advantage_dev = advantage(&q_shaped)
        .iter()
        .zip(advantage(&q_base))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let ties_shaped = extract_policy(&q_shaped, DEFAULT_TIE_EPS);
    let ties_base = extract_policy(&q_base, DEFAULT_TIE_EPS);
    let tie_set_mismatches = ties_shaped
        .tie_sets
        .iter()
        .zip(&ties_base.tie_sets)
        .filter(|(a, b)| a != b)
        .count();
    let passed = max_value_offset_dev <= IDENTITY_TOL
        && max_q_offset_dev <= IDENTITY_TOL
        && max_advantage_dev <= IDENTITY_TOL
        && tie_set_mismatches == 0;
    Ok(InvarianceReport {
        gamma,
        max_value_offset_dev,
        max_q_offset_dev,
        max_advantage_dev,
        tie_set_mismatches,
        tolerance: IDENTITY_TOL,
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub term: String,
    pub mode: ShapingMode,
    pub multiplier: f64,
    pub weight: f64,
    pub agreement: Option<AgreementReport>,
    /// Mean over states of the greedy policy's value under the baseline reward.
    pub baseline_return: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub multipliers: Vec<f64>,
    pub reference_return: f64,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn cell(&self, term: &str, mode: ShapingMode, multiplier: f64) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.term == term && c.mode == mode && c.multiplier == multiplier)
    }

    /// Minimum tie-aware agreement over the multipliers of one (term, mode) curve.
    pub fn min_tie_aware(&self, term: &str, mode: ShapingMode) -> Option<f64> {
        self.cells
            .iter()
            .filter(|c| c.term == term && c.mode == mode)
            .map(|c| c.agreement.map(|a| a.tie_aware_agreement))
            .collect::<Option<Vec<f64>>>()
            .and_then(|v| v.into_iter().reduce(f64::min))
    }

    /// Long-format CSV: term, mode, multiplier, agreement metrics, return.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "term",
            "mode",
            "multiplier",
            "weight",
            "exact_agreement",
            "tie_aware_agreement",
            "value_regret",
            "return",
            "converged",
        ])?;
        let f = |v: Option<f64>| v.map(|x| format!("{x:.12e}")).unwrap_or_default();
        for c in &self.cells {
            out.write_record([
                c.term.clone(),
                c.mode.to_string(),
                format!("{}", c.multiplier),
                format!("{}", c.weight),
                f(c.agreement.map(|a| a.exact_agreement)),
                f(c.agreement.map(|a| a.tie_aware_agreement)),
                f(c.agreement.map(|a| a.value_regret)),
                f(c.baseline_return),
                c.converged.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

fn with_anchor(multipliers: &[f64]) -> Vec<f64> {
    let mut m = multipliers.to_vec();
    if !m.contains(&1.0) {
        m.push(1.0);
    }
    m.sort_by(f64::total_cmp);
    m.dedup();
    m
}

/// Sweeps the weight of one shaping term in both DRS and PBRS form.
pub fn weight_sweep(
    mdp: &TabularMDP,
    base: &RewardSpec,
    term_template: &ShapingTerm,
    multipliers: &[f64],
    settings: &SolverSettings,
) -> Result<SweepResult> {
    let baseline = RewardModel::compile(&base.baseline(), mdp, settings.gamma)?;
    let reference = solve_and_evaluate(mdp, base, &baseline, settings)?;
    weight_sweep_against(
        mdp,
        base,
        &baseline,
        &reference,
        std::slice::from_ref(term_template),
        multipliers,
        settings,
    )
}

/// Sweep cells for several term templates against a precomputed reference solve.
///
/// Cells run in parallel; their order is (template, mode, multiplier).
pub fn weight_sweep_against(
    mdp: &TabularMDP,
    base: &RewardSpec,
    baseline: &RewardModel,
    reference: &Solution,
    templates: &[ShapingTerm],
    multipliers: &[f64],
    settings: &SolverSettings,
) -> Result<SweepResult> {
    let multipliers = with_anchor(multipliers);
    let mut jobs = Vec::new();
    for i in 0..templates.len() {
        for mode in [ShapingMode::Drs, ShapingMode::Pbrs] {
            for &m in &multipliers {
                jobs.push((i, mode, m));
            }
        }
    }
    let cells = jobs
        .into_par_iter()
        .with_max_len(1)
        .map(|(i, mode, m)| {
            let template = &templates[i];
            let term = ShapingTerm {
                mode,
                weight: template.weight * m,
                ..template.clone()
            };
            let label = template.name.clone().unwrap_or_else(|| format!("term{i}"));
            let spec = base.clone().with_term(term.clone());
            let outcome = solve_and_evaluate(mdp, &spec, baseline, settings).and_then(|sol| {
                let agreement = compare_policies(
                    (&reference.policy, &reference.baseline_values),
                    (&sol.q, &sol.policy),
                    mdp,
                    baseline,
                    settings.gamma,
                    settings.tie_eps,
                )?;
                Ok((sol, agreement))
            });
            match outcome {
                Ok((sol, agreement)) => SweepCell {
                    term: label,
                    mode,
                    multiplier: m,
                    weight: term.weight,
                    agreement: Some(agreement),
                    baseline_return: Some(mean(&sol.baseline_values)),
                    converged: sol.report.converged,
                    error: None,
                },
                Err(e) => SweepCell {
                    term: label,
                    mode,
                    multiplier: m,
                    weight: term.weight,
                    agreement: None,
                    baseline_return: None,
                    converged: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(SweepResult {
        multipliers,
        reference_return: mean(&reference.baseline_values),
        cells,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartDistribution {
    /// Uniform over all states.
    Uniform,
    State(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutOptions {
    pub n_episodes: usize,
    pub horizon: usize,
    pub seed: u64,
    pub start: StartDistribution,
    /// Histogram range per term; `None` uses the observed range.
    #[serde(default)]
    pub histogram_ranges: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermStats {
    pub term: String,
    pub mode: ShapingMode,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermDistribution {
    pub n_steps: usize,
    pub terms: Vec<TermStats>,
}

/// Samples seeded rollouts of `policy` and records each shaping term's
/// per-step value.
pub fn rollout_term_stats(
    mdp: &TabularMDP,
    policy: &Policy,
    rewards: &RewardModel,
    opts: &RolloutOptions,
) -> Result<TermDistribution> {
    if policy.n_states() != mdp.n_states() {
        return Err(Error::domain("policy does not cover the MDP"));
    }
    if let StartDistribution::State(s) = opts.start {
        if s >= mdp.n_states() {
            return Err(Error::domain(format!("start state {s} out of range")));
        }
    }
    let n_terms = rewards.terms().len();
    if let Some(r) = &opts.histogram_ranges {
        if r.len() != n_terms {
            return Err(Error::domain(
                "one histogram range per shaping term is required",
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut samples: Vec<Vec<f64>> =
        vec![Vec::with_capacity(opts.n_episodes * opts.horizon); n_terms];
    for _ in 0..opts.n_episodes {
        let mut s = match opts.start {
            StartDistribution::Uniform => rng.random_range(0..mdp.n_states()),
            StartDistribution::State(s) => s,
        };
        for _ in 0..opts.horizon {
            let a = policy.greedy_action[s];
            let next = sample_successor(mdp, s, a, &mut rng);
            for (k, out) in samples.iter_mut().enumerate() {
                out.push(rewards.term_value(k, s, next));
            }
            s = next;
        }
    }
    let terms = samples
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let range = opts.histogram_ranges.as_ref().map(|r| r[k]);
            term_stats(
                rewards.terms()[k].label(k),
                rewards.terms()[k].mode,
                v,
                range,
            )
        })
        .collect();
    Ok(TermDistribution {
        n_steps: opts.n_episodes * opts.horizon,
        terms,
    })
}

pub(crate) fn sample_successor(mdp: &TabularMDP, s: usize, a: usize, rng: &mut impl Rng) -> usize {
    let row = mdp.row(s, a);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for t in row {
        acc += t.prob;
        if u < acc {
            return t.next;
        }
    }
    row[row.len() - 1].next
}

fn term_stats(term: String, mode: ShapingMode, v: &[f64], range: Option<(f64, f64)>) -> TermStats {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = match range {
        Some(r) => r,
        None if v.is_empty() => (-0.5, 0.5),
        None => (min, max),
    };
    let (lo, hi) = if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    };
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let bin_edges = (0..=HISTOGRAM_BINS)
        .map(|i| lo + width * i as f64)
        .collect();
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for &x in v {
        let b = ((x - lo) / width).floor();
        let b = if b.is_nan() {
            0.0
        } else {
            b.clamp(0.0, (HISTOGRAM_BINS - 1) as f64)
        };
        counts[b as usize] += 1;
    }
    TermStats {
        term,
        mode,
        mean,
        std: var.sqrt(),
        min,
        max,
        bin_edges,
        counts,
    }
}

/// Exhaustive search over deterministic stationary policies, each evaluated
/// with a dense linear solve. Returns the optimal Q-table and value.
pub fn brute_force_solve(
    mdp: &TabularMDP,
    rewards: &RewardModel,
    gamma: f64,
) -> Result<(QTable, Vec<f64>)> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::domain(format!(
            "discount must lie in [0, 1), got {gamma}"
        )));
    }
    let (n, na) = (mdp.n_states(), mdp.n_actions());
    let count = (na as f64).powi(n as i32);
    if count > BRUTE_FORCE_LIMIT as f64 {
        return Err(Error::EnumerationGuard {
            policies: count,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    // r(s, a) straight from the per-transition rewards
    let mut r_sa = vec![0.0; n * na];
    for s in 0..n {
        for a in 0..na {
            let range = mdp.row_range(s, a);
            r_sa[s * na + a] = mdp.entries()[range.clone()]
                .iter()
                .zip(&rewards.entry_rewards[range])
                .map(|(t, r)| t.prob * r)
                .sum();
        }
    }
    let evaluate = |actions: &[usize]| -> Option<DVector<f64>> {
        let mut m = DMatrix::<f64>::identity(n, n);
        let mut b = DVector::<f64>::zeros(n);
        for s in 0..n {
            b[s] = r_sa[s * na + actions[s]];
            for t in mdp.row(s, actions[s]) {
                m[(s, t.next)] -= gamma * t.prob;
            }
        }
        m.lu().solve(&b)
    };
    let mut actions = vec![0usize; n];
    let mut best: Option<(f64, DVector<f64>)> = None;
    loop {
        let v = evaluate(&actions).ok_or_else(|| Error::domain("singular policy evaluation"))?;
        let total = v.sum();
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            best = Some((total, v));
        }
        // mixed-radix increment
        let mut k = 0;
        while k < n {
            actions[k] += 1;
            if actions[k] < na {
                break;
            }
            actions[k] = 0;
            k += 1;
        }
        if k == n {
            break;
        }
    }
    let v: Vec<f64> = best
        .expect("at least one policy")
        .1
        .iter()
        .copied()
        .collect();
    let mut q = QTable::filled(n, na, gamma, 0.0);
    for s in 0..n {
        for a in 0..na {
            let future: f64 = mdp.row(s, a).iter().map(|t| t.prob * v[t.next]).sum();
            q.values[s * na + a] = r_sa[s * na + a] + gamma * future;
        }
    }
    Ok((q, v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopRun {
    pub states: Vec<PendState>,
    pub torques: Vec<f64>,
    /// First step index at which the state lies in the sparse-reward target region.
    pub first_in_target: Option<usize>,
}

/// Runs the continuous pendulum under the greedy action of the interpolated Q-table.
pub fn closed_loop_rollout(
    grid: &Grid,
    q: &QTable,
    torques: &[f64],
    p: &PendulumParams,
    start: PendState,
    max_steps: usize,
) -> Result<ClosedLoopRun> {
    if grid.ndim() != 2 || grid.n_states() != q.n_states || torques.len() != q.n_actions {
        return Err(Error::domain("grid, Q-table and action set do not match"));
    }
    let mut s = start;
    let mut states = vec![s];
    let mut applied = Vec::with_capacity(max_steps);
    let mut first = in_target_region(s).then_some(0);
    let mut qx = vec![0.0; q.n_actions];
    for k in 1..=max_steps {
        let mut x = [s.theta, s.theta_dot];
        grid.clamp(&mut x);
        qx.iter_mut().for_each(|v| *v = 0.0);
        for (i, w) in grid.interp_weights(&x) {
            for (a, v) in qx.iter_mut().enumerate() {
                *v += w * q.get(i, a);
            }
        }
        let torque = torques[argmax(&qx)];
        s = step_pendulum(s, torque, p)?;
        states.push(s);
        applied.push(torque);
        if first.is_none() && in_target_region(s) {
            first = Some(k);
        }
    }
    Ok(ClosedLoopRun {
        states,
        torques: applied,
        first_in_target: first,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{Plant, Transition};
    use crate::shaping::BaseReward;
    use approx::assert_abs_diff_eq;

    fn native() -> RewardSpec {
        RewardSpec::base_only(BaseReward::Native)
    }

    #[test]
    fn self_comparison_is_perfect() {
        let mdp = TabularMDP::random(6, 3, 3, 1).unwrap();
        let settings = SolverSettings {
            gamma: 0.9,
            tol: 1e-10,
            ..Default::default()
        };
        let baseline = RewardModel::compile(&native(), &mdp, 0.9).unwrap();
        let sol = solve_and_evaluate(&mdp, &native(), &baseline, &settings).unwrap();
        let rep = compare_policies(
            (&sol.policy, &sol.baseline_values),
            (&sol.q, &sol.policy),
            &mdp,
            &baseline,
            0.9,
            DEFAULT_TIE_EPS,
        )
        .unwrap();
        assert_eq!(rep.exact_agreement, 1.0);
        assert_eq!(rep.tie_aware_agreement, 1.0);
        assert_eq!(rep.value_regret, 0.0);
    }

    #[test]
    fn single_perturbation_costs_regret() {
        let mdp = TabularMDP::random(6, 3, 3, 4).unwrap();
        let settings = SolverSettings {
            gamma: 0.9,
            tol: 1e-12,
            ..Default::default()
        };
        let baseline = RewardModel::compile(&native(), &mdp, 0.9).unwrap();
        let sol = solve_and_evaluate(&mdp, &native(), &baseline, &settings).unwrap();
        // switch state 0 to its worst action
        let row = sol.q.row(0);
        let worst = (0..3).min_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert!(row[worst] < row[sol.policy.greedy_action[0]]);
        let mut actions = sol.policy.greedy_action.clone();
        actions[0] = worst;
        let cand = Policy::from_actions(actions);
        let rep = compare_policies(
            (&sol.policy, &sol.baseline_values),
            (&sol.q, &cand),
            &mdp,
            &baseline,
            0.9,
            DEFAULT_TIE_EPS,
        )
        .unwrap();
        assert_abs_diff_eq!(rep.exact_agreement, 1.0 - 1.0 / 6.0, epsilon = 1e-15);
        assert!(rep.value_regret > 0.0);
        assert!(rep.tie_aware_agreement >= rep.exact_agreement);
    }

    #[test]
    fn shape_mismatch_is_a_domain_error() {
        let mdp = TabularMDP::random(4, 2, 2, 1).unwrap();
        let baseline = RewardModel::compile(&native(), &mdp, 0.9).unwrap();
        let p = Policy::from_actions(vec![0; 3]);
        let q = QTable::filled(4, 2, 0.9, 0.0);
        let r = compare_policies((&p, &[0.0; 3]), (&q, &p), &mdp, &baseline, 0.9, 0.0);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn constant_potential_is_invariant() {
        let mdp = TabularMDP::random(8, 3, 3, 3).unwrap();
        let c = 3.5;
        let rep =
            invariance_suite(&mdp, &native(), &PotentialFn::Constant { value: c }, 0.9).unwrap();
        assert!(rep.passed, "{rep:?}");
        let shaped = native().with_term(ShapingTerm::pbrs(PotentialFn::Constant { value: c }, 1.0));
        let base = RewardModel::compile(&native(), &mdp, 0.9).unwrap();
        let model = RewardModel::compile(&shaped, &mdp, 0.9).unwrap();
        for (a, b) in model.entry_rewards.iter().zip(&base.entry_rewards) {
            assert_abs_diff_eq!(a - b, (0.9 - 1.0) * c, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_potential_leaves_mdp_unchanged() {
        let mdp = TabularMDP::random(8, 3, 3, 5).unwrap();
        let phi = PotentialFn::Table {
            values: vec![0.0; 8],
        };
        let rep = invariance_suite(&mdp, &native(), &phi, 0.5).unwrap();
        assert_eq!(rep.max_q_offset_dev, 0.0);
        let shaped = native().with_term(ShapingTerm::pbrs(phi, 1.0));
        let a = RewardModel::compile(&shaped, &mdp, 0.5).unwrap();
        let b = RewardModel::compile(&native(), &mdp, 0.5).unwrap();
        assert_eq!(a.entry_rewards, b.entry_rewards);
    }

    #[test]
    fn zero_multiplier_reproduces_base() {
        let mdp = TabularMDP::random(6, 3, 3, 8).unwrap();
        let settings = SolverSettings {
            gamma: 0.9,
            tol: 1e-10,
            ..Default::default()
        };
        let term = ShapingTerm::drs(
            PotentialFn::Table {
                values: vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0],
            },
            1.0,
        )
        .named("t");
        let res = weight_sweep(&mdp, &native(), &term, &[0.0, 1.0, 10.0], &settings).unwrap();
        assert_eq!(res.multipliers, vec![0.0, 1.0, 10.0]);
        for mode in [ShapingMode::Drs, ShapingMode::Pbrs] {
            let a = res.cell("t", mode, 0.0).unwrap().agreement.unwrap();
            assert_eq!(a.exact_agreement, 1.0);
            assert_eq!(a.value_regret, 0.0);
        }
        for &m in &res.multipliers {
            let a = res
                .cell("t", ShapingMode::Pbrs, m)
                .unwrap()
                .agreement
                .unwrap();
            assert_eq!(a.tie_aware_agreement, 1.0);
            assert!(a.value_regret <= 1e-6);
        }
        assert_eq!(res.cells.len(), 6);
    }

    #[test]
    fn anchor_multiplier_is_inserted() {
        assert_eq!(with_anchor(&[10.0, 0.1]), vec![0.1, 1.0, 10.0]);
    }

    #[test]
    fn rollout_constant_pbrs_is_zero() {
        let mdp = TabularMDP::random(5, 2, 3, 2).unwrap();
        let spec = native()
            .with_term(
                ShapingTerm::pbrs(PotentialFn::Constant { value: 7.0 }, 1.0).with_pbrs_gamma(1.0),
            )
            .with_term(ShapingTerm::drs(PotentialFn::Constant { value: 7.0 }, 0.0));
        let model = RewardModel::compile(&spec, &mdp, 0.9).unwrap();
        let pi = Policy::from_actions(vec![0, 1, 0, 1, 0]);
        let opts = RolloutOptions {
            n_episodes: 10,
            horizon: 20,
            seed: 3,
            start: StartDistribution::Uniform,
            histogram_ranges: None,
        };
        let d = rollout_term_stats(&mdp, &pi, &model, &opts).unwrap();
        assert_eq!(d.n_steps, 200);
        for t in &d.terms {
            assert_eq!(t.mean, 0.0);
            assert_eq!(t.std, 0.0);
            assert_eq!(t.counts.iter().sum::<u64>(), 200);
        }
        assert_eq!(d, rollout_term_stats(&mdp, &pi, &model, &opts).unwrap());
    }

    #[test]
    fn brute_force_single_state_picks_best_reward() {
        let mdp = TabularMDP::from_rows(
            3,
            1,
            vec![0.0],
            vec![vec![Transition { next: 0, prob: 1.0 }]; 3],
            Some(vec![vec![0.2], vec![0.7], vec![-1.0]]),
            vec![false],
            Plant::Generic,
        )
        .unwrap();
        let model = RewardModel::compile(&native(), &mdp, 0.5).unwrap();
        let (q, v) = brute_force_solve(&mdp, &model, 0.5).unwrap();
        assert_abs_diff_eq!(v[0], 0.7 / 0.5, epsilon = 1e-12);
        assert_eq!(q.greedy(0), 1);
    }

    #[test]
    fn brute_force_guard() {
        let mdp = TabularMDP::random(13, 3, 2, 1).unwrap();
        let model = RewardModel::compile(&native(), &mdp, 0.9).unwrap();
        assert!(matches!(
            brute_force_solve(&mdp, &model, 0.9),
            Err(Error::EnumerationGuard { .. })
        ));
    }
}
