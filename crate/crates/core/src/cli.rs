//! Config-driven experiment runner behind the `shapelab` binary.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::{
    compare_policies, invariance_suite, rollout_term_stats, solve_and_evaluate,
    weight_sweep_against, InvarianceReport, RolloutOptions, Solution, TermDistribution,
};
use crate::config::{locate, Experiment, ExperimentConfig, PlantConfig};
use crate::dynamics::{build_gridworld, GridworldSpec};
use crate::error::{Error, Result};
use crate::mdp::{Plant, TabularMDP};
use crate::shaping::{BaseReward, PotentialFn, RewardModel, RewardSpec};
use crate::solver::QTable;
use crate::tabulation::{
    build_grid, cache_key, tabulate_pendulum, ActionGrid, DimSpec, Grid, GridSpec,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub const CACHE_ENV: &str = "SHAPELAB_CACHE";
pub const VERSION: &str = env!("SHAPELAB_VERSION");

#[derive(Debug, Parser)]
#[command(name = "shapelab", version = VERSION, about = "Tabular reward-shaping experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Solve one reward spec and export value, policy and reward grids.
    Solve(RunArgs),
    /// Sweep shaping weights in DRS and PBRS form.
    Sweep(RunArgs),
    /// Compare a candidate reward against the reference reward.
    Compare(RunArgs),
    /// Roll out the greedy policy and summarize each shaping term.
    Distribution(RunArgs),
    /// Check the PBRS invariance identities.
    Invariance(RunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Solve(_) => "solve",
            Command::Sweep(_) => "sweep",
            Command::Compare(_) => "compare",
            Command::Distribution(_) => "distribution",
            Command::Invariance(_) => "invariance",
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Solve(a)
            | Command::Sweep(a)
            | Command::Compare(a)
            | Command::Distribution(a)
            | Command::Invariance(a) => a,
        }
    }
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; falls back to the config's `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all hardware threads).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Result of a run that got as far as writing artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub artifacts: Vec<String>,
    pub converged: bool,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Serde(_) => EXIT_CONFIG,
        Error::NotConverged { .. } => EXIT_NOT_CONVERGED,
        Error::Io { .. } | Error::Csv(_) => EXIT_IO,
        _ => EXIT_FAILURE,
    }
}

/// Runs a parsed command line and reports; returns the process exit code.
pub fn main_with(cli: &Cli) -> i32 {
    let name = cli.command.name();
    let args = cli.command.args();
    let result = match args.jobs {
        Some(0) => Err(Error::config("--jobs must be positive")),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(name, args)),
            Err(e) => Err(Error::config(format!(
                "cannot build a pool of {n} threads: {e}"
            ))),
        },
        None => run(name, args),
    };
    match result {
        Ok(o) if o.converged => EXIT_OK,
        Ok(o) => {
            eprintln!(
                "shapelab: solver did not converge; partial artifacts in {}",
                o.out_dir.display()
            );
            EXIT_NOT_CONVERGED
        }
        Err(e) => {
            eprintln!("shapelab: {e}");
            exit_code(&e)
        }
    }
}

/// Reads and validates a config file; messages carry `file:line:`.
pub fn load_config(path: &Path) -> Result<(ExperimentConfig, String)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let shown = path.display();
    let cfg = ExperimentConfig::from_json(&text).map_err(|e| match e {
        Error::Config(m) => Error::config(format!("{shown}: {m}")),
        e => e,
    })?;
    Ok((cfg, text))
}

fn check(cfg: &ExperimentConfig, text: &str, path: &Path) -> Result<()> {
    if let Some(issue) = cfg.issues().into_iter().next() {
        let line = locate(text, &issue.path).unwrap_or(1);
        return Err(Error::config(format!(
            "{}:{}: {}: {}",
            path.display(),
            line,
            issue.path,
            issue.message
        )));
    }
    Ok(())
}

pub fn run(command: &str, args: &RunArgs) -> Result<RunOutcome> {
    let started = Instant::now();
    let (mut cfg, text) = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    check(&cfg, &text, &args.config)?;
    if cfg.experiment.name() != command {
        return Err(Error::config(format!(
            "{}: subcommand `{}` does not match the config's `{}` experiment",
            args.config.display(),
            command,
            cfg.experiment.name()
        )));
    }
    let out_dir = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::config("no output directory: pass --out or set output_dir"))?;
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let cache_dir = std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| out_dir.join("cache"));

    let setup = Setup::build(&cfg, &cache_dir)?;
    let mut writer = ArtifactWriter::new(&out_dir);
    let mut solves = Vec::new();
    let converged = match &cfg.experiment {
        Experiment::Solve {} => run_solve(&cfg, &setup, &mut writer, &mut solves)?,
        Experiment::Sweep(s) => {
            let baseline =
                RewardModel::compile(&cfg.rewards.baseline(), &setup.mdp, cfg.solver.gamma)?;
            let reference = solve_and_evaluate(&setup.mdp, &cfg.rewards, &baseline, &cfg.solver)?;
            solves.push(SolveSummary::of("reference", &reference));
            let sweep = weight_sweep_against(
                &setup.mdp,
                &cfg.rewards,
                &baseline,
                &reference,
                &s.terms,
                &s.multipliers,
                &cfg.solver,
            )?;
            let mut csv = Vec::new();
            sweep.write_csv(&mut csv)?;
            writer.bytes("sweep.csv", &csv)?;
            writer.json("sweep.json", &sweep)?;
            reference.report.converged && sweep.cells.iter().all(|c| c.converged)
        }
        Experiment::Compare(c) => {
            let baseline =
                RewardModel::compile(&cfg.rewards.baseline(), &setup.mdp, cfg.solver.gamma)?;
            let reference = solve_and_evaluate(&setup.mdp, &cfg.rewards, &baseline, &cfg.solver)?;
            let candidate = solve_and_evaluate(&setup.mdp, &c.candidate, &baseline, &cfg.solver)?;
            solves.push(SolveSummary::of("reference", &reference));
            solves.push(SolveSummary::of("candidate", &candidate));
            let report = compare_policies(
                (&reference.policy, &reference.baseline_values),
                (&candidate.q, &candidate.policy),
                &setup.mdp,
                &baseline,
                cfg.solver.gamma,
                cfg.solver.tie_eps,
            )?;
            writer.json("agreement.json", &report)?;
            reference.report.converged && candidate.report.converged
        }
        Experiment::Distribution(d) => {
            let seed = cfg.seed.expect("validated");
            let mut runs = Vec::new();
            let mut ok = true;
            for (i, spec) in std::iter::once(&cfg.rewards).chain(&d.also).enumerate() {
                let baseline =
                    RewardModel::compile(&spec.baseline(), &setup.mdp, cfg.solver.gamma)?;
                let sol = solve_and_evaluate(&setup.mdp, spec, &baseline, &cfg.solver)?;
                let model = RewardModel::compile(spec, &setup.mdp, cfg.solver.gamma)?;
                let opts = RolloutOptions {
                    n_episodes: d.n_episodes,
                    horizon: d.horizon,
                    seed,
                    start: d.start,
                    histogram_ranges: None,
                };
                let dist = rollout_term_stats(&setup.mdp, &sol.policy, &model, &opts)?;
                solves.push(SolveSummary::of(&format!("rewards[{i}]"), &sol));
                ok &= sol.report.converged;
                runs.push(DistributionRun {
                    rewards: i,
                    converged: sol.report.converged,
                    distribution: dist,
                });
            }
            writer.json("distribution.json", &DistributionArtifact { runs })?;
            ok
        }
        Experiment::Invariance(c) => {
            let gamma = cfg.solver.gamma;
            let configured = invariance_suite(&setup.mdp, &cfg.rewards, &c.potential, gamma)?;
            let mut random = Vec::new();
            if let Some(b) = &c.random_mdps {
                let seed = cfg.seed.expect("validated");
                for i in 0..b.count {
                    let mdp_seed = seed.wrapping_add(i as u64);
                    let mdp = TabularMDP::random(b.n_states, b.n_actions, b.branching, mdp_seed)?;
                    let phi = random_table_potential(b.n_states, mdp_seed);
                    let base = RewardSpec::base_only(BaseReward::Native);
                    for &g in &b.gammas {
                        random.push(RandomInvariance {
                            mdp_seed,
                            gamma: g,
                            report: invariance_suite(&mdp, &base, &phi, g)?,
                        });
                    }
                }
            }
            let passed = configured.passed && random.iter().all(|r| r.report.passed);
            writer.json(
                "invariance.json",
                &InvarianceArtifact {
                    passed,
                    configured,
                    random,
                },
            )?;
            true
        }
    };

    let manifest = Manifest {
        tool: "shapelab",
        version: VERSION,
        command: cfg.experiment.name(),
        status: if converged { "ok" } else { "not_converged" },
        wall_time_s: started.elapsed().as_secs_f64(),
        mdp: MdpSummary {
            n_states: setup.mdp.n_states(),
            n_actions: setup.mdp.n_actions(),
            cache_key: setup.cache_key.clone(),
        },
        solves,
        artifacts: writer.written.clone(),
        config: &cfg,
    };
    writer.json_untracked("manifest.json", &manifest)?;
    Ok(RunOutcome {
        out_dir,
        artifacts: writer.written,
        converged,
    })
}

/// Table potential with entries uniform in [-1, 1).
pub fn random_table_potential(n_states: usize, seed: u64) -> PotentialFn {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7ab1e);
    PotentialFn::Table {
        values: (0..n_states).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

struct Setup {
    mdp: TabularMDP,
    grid: Grid,
    cache_key: Option<String>,
}

impl Setup {
    fn build(cfg: &ExperimentConfig, cache_dir: &Path) -> Result<Self> {
        match &cfg.plant {
            PlantConfig::Pendulum(p) => {
                let spec = cfg.grid_spec();
                let grid = build_grid(&spec)?;
                let key = cache_key(p, &spec, cfg.interp);
                let mdp = load_or_tabulate(
                    cache_dir,
                    &key,
                    || tabulate_pendulum(p, &spec, cfg.interp),
                    Plant::Pendulum(*p),
                )?;
                Ok(Setup {
                    mdp,
                    grid,
                    cache_key: Some(key),
                })
            }
            PlantConfig::Gridworld(g) => Ok(Setup {
                mdp: build_gridworld(g)?,
                grid: gridworld_grid(g)?,
                cache_key: None,
            }),
        }
    }
}

fn load_or_tabulate(
    dir: &Path,
    key: &str,
    build: impl FnOnce() -> Result<TabularMDP>,
    plant: Plant,
) -> Result<TabularMDP> {
    let path = dir.join(format!("{key}.mdp"));
    if let Ok(f) = fs::File::open(&path) {
        if let Ok(mdp) = TabularMDP::read_binary(std::io::BufReader::new(f), plant) {
            return Ok(mdp);
        }
    }
    let mdp = build()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!("{key}.mdp.tmp"));
    let mut w = BufWriter::new(fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?);
    mdp.write_binary(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(mdp)
}

/// Grid whose row-major layout matches gridworld indices: axis 0 is y, axis 1 is x.
pub fn gridworld_grid(g: &GridworldSpec) -> Result<Grid> {
    let axis = |n: usize| DimSpec {
        min: 0.0,
        max: (n.max(2) - 1) as f64,
        count: n,
        periodic: false,
    };
    build_grid(&GridSpec {
        dims: vec![axis(g.height), axis(g.width)],
        actions: ActionGrid {
            min: 0.0,
            max: 3.0,
            count: 4,
        },
        max_states: g.width * g.height,
    })
}

fn run_solve(
    cfg: &ExperimentConfig,
    setup: &Setup,
    writer: &mut ArtifactWriter,
    solves: &mut Vec<SolveSummary>,
) -> Result<bool> {
    let mdp = &setup.mdp;
    let baseline = RewardModel::compile(&cfg.rewards.baseline(), mdp, cfg.solver.gamma)?;
    let sol = solve_and_evaluate(mdp, &cfg.rewards, &baseline, &cfg.solver)?;
    let model = RewardModel::compile(&cfg.rewards, mdp, cfg.solver.gamma)?;
    solves.push(SolveSummary::of("rewards", &sol));

    writer.json("qtable.json", &sol.q)?;
    writer.with_file("states.csv", |w| write_states(w, mdp, &sol))?;
    for (name, quantity) in [
        ("value.csv", GridQuantity::Value),
        ("policy.csv", GridQuantity::Policy),
        ("reward_field.csv", GridQuantity::RewardField(&model)),
    ] {
        writer.with_file(name, |w| write_grid(w, &sol.q, &setup.grid, quantity))?;
    }
    for (k, term) in model.terms().iter().enumerate() {
        let name = format!("potential_{}.csv", sanitize(&term.label(k)));
        let phi = model.potentials(k);
        writer.with_file(&name, |w| {
            write_grid(w, &sol.q, &setup.grid, GridQuantity::Potential(phi))
        })?;
    }
    Ok(sol.report.converged)
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_states<W: Write>(w: W, mdp: &TabularMDP, sol: &Solution) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = match mdp.plant() {
        Plant::Pendulum(_) => vec!["theta".into(), "theta_dot".into()],
        Plant::Gridworld(_) => vec!["x".into(), "y".into()],
        Plant::Generic => (0..mdp.state_dim()).map(|i| format!("c{i}")).collect(),
    };
    header.extend(["value".into(), "action".into(), "baseline_value".into()]);
    out.write_record(&header)?;
    let v = sol.q.state_values();
    for (s, value) in v.iter().enumerate() {
        let mut rec: Vec<String> = mdp.coords(s).iter().map(|c| c.to_string()).collect();
        rec.push(value.to_string());
        rec.push(sol.policy.greedy_action[s].to_string());
        rec.push(sol.baseline_values[s].to_string());
        out.write_record(&rec)?;
    }
    out.flush().map_err(|e| Error::io("states.csv", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub enum GridQuantity<'a> {
    /// max_a Q(s, a)
    Value,
    /// Greedy action index.
    Policy,
    /// Expected one-step reward under the greedy action.
    RewardField(&'a RewardModel),
    /// Per-state potential values.
    Potential(&'a [f64]),
}

/// Writes one per-state quantity as a CSV matrix: axis 0 across the columns,
/// axis 1 down the rows, with a header row and column of node coordinates.
pub fn export_grid(q: &QTable, grid: &Grid, quantity: GridQuantity<'_>, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_grid(&mut w, q, grid, quantity)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_grid<W: Write>(w: W, q: &QTable, grid: &Grid, quantity: GridQuantity<'_>) -> Result<()> {
    if grid.ndim() != 2 {
        return Err(Error::domain(format!(
            "grid export needs a 2-D grid, got {} dimensions",
            grid.ndim()
        )));
    }
    if q.n_states != grid.n_states() {
        return Err(Error::domain(
            "Q-table and grid disagree on the number of states",
        ));
    }
    let cell = |s: usize| -> String {
        match quantity {
            GridQuantity::Value => q
                .row(s)
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
                .to_string(),
            GridQuantity::Policy => q.greedy(s).to_string(),
            GridQuantity::RewardField(m) => m.expected(s, q.greedy(s)).to_string(),
            GridQuantity::Potential(phi) => phi[s].to_string(),
        }
    };
    if let GridQuantity::Potential(phi) = quantity {
        if phi.len() != grid.n_states() {
            return Err(Error::domain("potential does not cover the grid"));
        }
    }
    let (cols, rows) = (grid.dims()[0], grid.dims()[1]);
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec![String::new()];
    header.extend(cols.nodes().iter().map(|x| x.to_string()));
    out.write_record(&header)?;
    for (j, y) in rows.nodes().iter().enumerate() {
        let mut rec = vec![y.to_string()];
        rec.extend((0..cols.count).map(|i| cell(grid.index(&[i, j]))));
        out.write_record(&rec)?;
    }
    out.flush().map_err(|e| Error::io("grid export", e))?;
    Ok(())
}

/// Funnels every artifact write through one place so the manifest lists them all.
struct ArtifactWriter {
    dir: PathBuf,
    written: Vec<String>,
}

impl ArtifactWriter {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        }
    }

    fn with_file(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>,
    ) -> Result<()> {
        let path = self.dir.join(name);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn bytes(&mut self, name: &str, data: &[u8]) -> Result<()> {
        self.with_file(name, |w| w.write_all(data).map_err(|e| Error::io(name, e)))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut data = serde_json::to_vec_pretty(value)?;
        data.push(b'\n');
        self.bytes(name, &data)
    }

    fn json_untracked<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let path = self.dir.join(name);
        let mut data = serde_json::to_vec_pretty(value)?;
        data.push(b'\n');
        fs::write(&path, data).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    status: &'static str,
    wall_time_s: f64,
    mdp: MdpSummary,
    solves: Vec<SolveSummary>,
    artifacts: Vec<String>,
    config: &'a ExperimentConfig,
}

#[derive(Debug, Serialize)]
struct MdpSummary {
    n_states: usize,
    n_actions: usize,
    cache_key: Option<String>,
}

#[derive(Debug, Serialize)]
struct SolveSummary {
    label: String,
    iterations: usize,
    final_residual: f64,
    converged: bool,
}

impl SolveSummary {
    fn of(label: &str, sol: &Solution) -> Self {
        Self {
            label: label.to_string(),
            iterations: sol.report.iterations,
            final_residual: sol.report.final_residual(),
            converged: sol.report.converged,
        }
    }
}

#[derive(Debug, Serialize)]
struct DistributionArtifact {
    runs: Vec<DistributionRun>,
}

#[derive(Debug, Serialize)]
struct DistributionRun {
    /// 0 is the top-level reward spec, then each `also` entry in order.
    rewards: usize,
    converged: bool,
    distribution: TermDistribution,
}

#[derive(Debug, Serialize)]
struct InvarianceArtifact {
    passed: bool,
    configured: InvarianceReport,
    random: Vec<RandomInvariance>,
}

#[derive(Debug, Serialize)]
struct RandomInvariance {
    mdp_seed: u64,
    gamma: f64,
    report: InvarianceReport,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabulation::GridSpec;

    #[test]
    fn grid_export_shape_and_headers() {
        let grid = build_grid(&GridSpec::pendulum(4, 3, 2)).unwrap();
        let q = QTable::from_state_values(&(0..12).map(|i| i as f64).collect::<Vec<_>>(), 2, 0.9);
        let mut buf = Vec::new();
        write_grid(&mut buf, &q, &grid, GridQuantity::Value).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|l| l.split(',').count() == 5));
        assert!(lines[0].starts_with(','));
        // theta index 1, theta_dot index 0 -> state 1 * 3 + 0
        assert_eq!(lines[1].split(',').nth(2).unwrap(), "3");
    }

    #[test]
    fn grid_export_refuses_non_2d() {
        let mut spec = GridSpec::pendulum(4, 3, 2);
        spec.dims.pop();
        let grid = build_grid(&spec).unwrap();
        let q = QTable::filled(4, 2, 0.9, 0.0);
        assert!(write_grid(Vec::new(), &q, &grid, GridQuantity::Policy).is_err());
    }

    #[test]
    fn gridworld_grid_matches_indices() {
        let g = GridworldSpec {
            width: 3,
            height: 2,
            goal: [2, 1],
            goal_reward: 1.0,
            step_reward: 0.0,
        };
        let grid = gridworld_grid(&g).unwrap();
        assert_eq!(grid.index(&[1, 2]), g.index(2, 1));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("x")), EXIT_CONFIG);
        assert_eq!(
            exit_code(&Error::NotConverged {
                iterations: 1,
                residual: 1.0
            }),
            EXIT_NOT_CONVERGED
        );
        assert_eq!(
            exit_code(&Error::io("p", std::io::Error::other("x"))),
            EXIT_IO
        );
    }
}
