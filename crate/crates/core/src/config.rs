//! Experiment configuration files.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::analysis::{SolverSettings, StartDistribution, DEFAULT_MULTIPLIERS};
use crate::dynamics::{GridworldSpec, PendulumParams};
use crate::error::{Error, Result};
use crate::shaping::{PotentialFn, RewardSpec, ShapingTerm};
use crate::tabulation::{GridSpec, InterpMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantConfig {
    Pendulum(PendulumParams),
    Gridworld(GridworldSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Nominal terms; each is swept in both DRS and PBRS form.
    pub terms: Vec<ShapingTerm>,
    #[serde(default = "default_multipliers")]
    pub multipliers: Vec<f64>,
}

fn default_multipliers() -> Vec<f64> {
    DEFAULT_MULTIPLIERS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    /// Compared against the top-level `rewards`, which act as the reference.
    pub candidate: RewardSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionConfig {
    pub n_episodes: usize,
    pub horizon: usize,
    #[serde(default = "default_start")]
    pub start: StartDistribution,
    /// Further reward specs rolled out with the same options, each under its own policy.
    #[serde(default)]
    pub also: Vec<RewardSpec>,
}

fn default_start() -> StartDistribution {
    StartDistribution::Uniform
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomMdpBatch {
    pub count: usize,
    pub n_states: usize,
    pub n_actions: usize,
    #[serde(default = "default_branching")]
    pub branching: usize,
    pub gammas: Vec<f64>,
}

fn default_branching() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvarianceConfig {
    pub potential: PotentialFn,
    #[serde(default)]
    pub random_mdps: Option<RandomMdpBatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    Solve {},
    Sweep(SweepConfig),
    Compare(CompareConfig),
    Distribution(DistributionConfig),
    Invariance(InvarianceConfig),
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Solve {} => "solve",
            Experiment::Sweep(_) => "sweep",
            Experiment::Compare(_) => "compare",
            Experiment::Distribution(_) => "distribution",
            Experiment::Invariance(_) => "invariance",
        }
    }

    fn is_sampled(&self) -> bool {
        match self {
            Experiment::Distribution(_) => true,
            Experiment::Invariance(c) => c.random_mdps.is_some(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: PlantConfig,
    /// Pendulum discretization; ignored for the gridworld.
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub interp: InterpMode,
    pub rewards: RewardSpec,
    #[serde(default)]
    pub solver: SolverSettings,
    pub experiment: Experiment,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// A validation failure with the dotted path of the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::config(format!("line {}, column {}: {}", e.line(), e.column(), e)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn grid_spec(&self) -> GridSpec {
        self.grid.clone().unwrap_or_default()
    }

    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut push = |path: &str, r: Result<()>| {
            if let Err(e) = r {
                let message = match e {
                    Error::Config(m) | Error::Domain(m) => m,
                    e => e.to_string(),
                };
                out.push(ConfigIssue {
                    path: path.to_string(),
                    message,
                });
            }
        };
        match &self.plant {
            PlantConfig::Pendulum(p) => {
                push("plant.pendulum", p.validate());
                push("grid", self.grid_spec().validate());
            }
            PlantConfig::Gridworld(g) => push("plant.gridworld", g.validate()),
        }
        push("rewards", self.rewards.validate());
        push("solver", self.solver.validate());
        match &self.experiment {
            Experiment::Sweep(s) => {
                if s.terms.is_empty() {
                    push(
                        "experiment.sweep.terms",
                        Err(Error::config("at least one term is required")),
                    );
                }
                for (i, t) in s.terms.iter().enumerate() {
                    push(&format!("experiment.sweep.terms[{i}]"), t.validate());
                }
                if s.multipliers.iter().any(|m| !m.is_finite() || *m < 0.0) {
                    push(
                        "experiment.sweep.multipliers",
                        Err(Error::config("multipliers must be finite and >= 0")),
                    );
                }
            }
            Experiment::Compare(c) => push("experiment.compare.candidate", c.candidate.validate()),
            Experiment::Distribution(d) => {
                if d.n_episodes == 0 || d.horizon == 0 {
                    push(
                        "experiment.distribution",
                        Err(Error::config("n_episodes and horizon must be positive")),
                    );
                }
                for (i, r) in d.also.iter().enumerate() {
                    push(&format!("experiment.distribution.also[{i}]"), r.validate());
                }
            }
            Experiment::Invariance(c) => {
                push("experiment.invariance.potential", c.potential.validate());
                if let Some(b) = &c.random_mdps {
                    if b.count == 0 || b.n_states == 0 || b.n_actions == 0 {
                        push(
                            "experiment.invariance.random_mdps",
                            Err(Error::config(
                                "count, n_states and n_actions must be positive",
                            )),
                        );
                    }
                    if b.gammas.iter().any(|g| !(0.0..1.0).contains(g)) {
                        push(
                            "experiment.invariance.random_mdps.gammas",
                            Err(Error::config("every gamma must lie in [0, 1)")),
                        );
                    }
                }
            }
            Experiment::Solve {} => {}
        }
        if self.experiment.is_sampled() && self.seed.is_none() {
            push(
                "seed",
                Err(Error::config(format!(
                    "the {} experiment samples and needs a seed",
                    self.experiment.name()
                ))),
            );
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.issues().into_iter().next() {
            None => Ok(()),
            Some(i) => Err(Error::config(format!("{}: {}", i.path, i.message))),
        }
    }
}

/// 1-based line of the first occurrence of the last key in a dotted path.
pub fn locate(text: &str, path: &str) -> Option<usize> {
    let key = path.rsplit('.').next()?;
    let key = key.split('[').next()?;
    let needle = format!("\"{key}\"");
    text.lines()
        .position(|l| l.contains(&needle))
        .map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SOLVE: &str = r#"{
  "plant": {"pendulum": {}},
  "rewards": {"base": {"kind": "pendulum_sparse"}},
  "solver": {"gamma": 0.99, "tol": 1e-8, "max_iter": 100000, "tie_eps": 1e-6},
  "experiment": {"solve": {}}
}"#;

    #[test]
    fn parses_minimal_solve() {
        let c = ExperimentConfig::from_json(SOLVE).unwrap();
        assert_eq!(c.plant, PlantConfig::Pendulum(PendulumParams::default()));
        assert_eq!(c.grid_spec(), GridSpec::default());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::from_json(SOLVE).unwrap();
        c.seed = Some(9);
        c.experiment = Experiment::Sweep(SweepConfig {
            terms: vec![ShapingTerm::drs(
                PotentialFn::EnergyError {
                    target_multiplier: 2.0,
                },
                -1.0,
            )],
            multipliers: default_multipliers(),
        });
        let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let bad = SOLVE.replace("\"tol\": 1e-8", "\"tol\": ");
        let msg = ExperimentConfig::from_json(&bad).unwrap_err().to_string();
        assert!(msg.contains("line 4"), "{msg}");
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let bad = SOLVE.replace("\"gamma\": 0.99", "\"gamma\": 1.5");
        let c = ExperimentConfig::from_json(&bad).unwrap();
        let issues = c.issues();
        assert_eq!(issues[0].path, "solver");
        assert_eq!(locate(&bad, "solver"), Some(4));
    }

    #[test]
    fn sampled_experiments_need_a_seed() {
        let mut c = ExperimentConfig::from_json(SOLVE).unwrap();
        c.experiment = Experiment::Distribution(DistributionConfig {
            n_episodes: 2,
            horizon: 3,
            start: StartDistribution::Uniform,
            also: vec![],
        });
        assert!(c.validate().is_err());
        c.seed = Some(1);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let bad = SOLVE.replace("\"experiment\"", "\"experimnet\"");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }
}
