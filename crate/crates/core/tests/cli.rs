use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use shapelab::config::ExperimentConfig;

const BIN: &str = env!("CARGO_BIN_EXE_shapelab");

fn small_pendulum(rewards: &str, experiment: &str, extra: &str) -> String {
    format!(
        r#"{{
  "plant": {{"pendulum": {{}}}},
  "grid": {{
    "dims": [
      {{"min": -3.141592653589793, "max": 3.141592653589793, "count": 20, "periodic": true}},
      {{"min": -8.0, "max": 8.0, "count": 21, "periodic": false}}
    ],
    "actions": {{"min": -2.0, "max": 2.0, "count": 5}}
  }},
  "rewards": {rewards},
  "solver": {{"gamma": 0.95, "tol": 1e-8, "max_iter": 100000, "tie_eps": 1e-6}},
  "experiment": {experiment}{extra}
}}
"#
    )
}

const SPARSE: &str = r#"{"base": {"kind": "pendulum_sparse"}}"#;
const PBRS_ENERGY: &str = r#"{"base": {"kind": "pendulum_sparse"}, "terms": [
    {"name": "energy", "potential": {"variant": "energy_error", "target_multiplier": 1.0}, "weight": -1.0, "mode": "pbrs"}]}"#;
const DRS_ENERGY: &str = r#"{"base": {"kind": "pendulum_sparse"}, "terms": [
    {"name": "energy", "potential": {"variant": "energy_error", "target_multiplier": 1.0}, "weight": -1.0, "mode": "drs"}]}"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn shapelab(args: &[&str], cache: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .env("SHAPELAB_CACHE", cache)
        .output()
        .unwrap()
}

fn run(cmd: &str, config: &Path, out: &Path, cache: &Path) -> Output {
    shapelab(
        &[
            cmd,
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        cache,
    )
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn manifest(out: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

/// Every tracked artifact of `a` is byte-identical to its namesake in `b`.
fn assert_same_artifacts(a: &Path, b: &Path) {
    let listed = manifest(a)["artifacts"].as_array().unwrap().clone();
    assert!(!listed.is_empty());
    for name in listed {
        let name = name.as_str().unwrap();
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs"
        );
    }
}

#[test]
fn solve_writes_artifacts_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let cfg = write(
        tmp.path(),
        "c.json",
        &small_pendulum(PBRS_ENERGY, r#"{"solve": {}}"#, ""),
    );
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = run("solve", &cfg, out, &cache);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    for f in [
        "value.csv",
        "policy.csv",
        "qtable.json",
        "manifest.json",
        "states.csv",
        "reward_field.csv",
    ] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    assert_same_artifacts(&a, &b);

    let m = manifest(&a);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["command"], "solve");
    assert!(m["version"]
        .as_str()
        .unwrap()
        .starts_with(env!("CARGO_PKG_VERSION")));
    let echoed: ExperimentConfig = serde_json::from_value(m["config"].clone()).unwrap();
    let original = ExperimentConfig::from_json(&fs::read_to_string(&cfg).unwrap()).unwrap();
    assert_eq!(echoed, original);

    // the cache went to SHAPELAB_CACHE, not under the output directory
    assert_eq!(fs::read_dir(&cache).unwrap().count(), 1);
    assert!(!a.join("cache").exists());
}

#[test]
fn grid_exports_have_coordinate_headers() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "c.json",
        &small_pendulum(PBRS_ENERGY, r#"{"solve": {}}"#, ""),
    );
    let out = tmp.path().join("o");
    assert_eq!(
        run("solve", &cfg, &out, &tmp.path().join("cache"))
            .status
            .code(),
        Some(0)
    );

    let value = read_csv(&out.join("value.csv"));
    assert_eq!(value.len(), 21 + 1);
    assert!(value.iter().all(|r| r.len() == 20 + 1));
    assert_eq!(value[0][0], "");
    assert_eq!(value[0][1].parse::<f64>().unwrap(), -std::f64::consts::PI);
    assert_eq!(value[1][0].parse::<f64>().unwrap(), -8.0);

    let policy = read_csv(&out.join("policy.csv"));
    for row in &policy[1..] {
        for cell in &row[1..] {
            let a: usize = cell.parse().expect("integer action");
            assert!(a < 5);
        }
    }

    let phi = read_csv(&out.join("potential_energy.csv"));
    let col = phi[0]
        .iter()
        .position(|c| c == "0")
        .expect("theta = 0 node");
    let row = phi
        .iter()
        .position(|r| r[0] == "0")
        .expect("theta_dot = 0 node");
    assert_eq!(phi[row][col].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn compare_reports_three_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let exp = format!(r#"{{"compare": {{"candidate": {DRS_ENERGY}}}}}"#);
    let cfg = write(tmp.path(), "c.json", &small_pendulum(SPARSE, &exp, ""));
    let out = tmp.path().join("o");
    assert_eq!(
        run("compare", &cfg, &out, &tmp.path().join("cache"))
            .status
            .code(),
        Some(0)
    );
    let rep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("agreement.json")).unwrap()).unwrap();
    let exact = rep["exact_agreement"].as_f64().unwrap();
    let tie = rep["tie_aware_agreement"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&exact) && exact <= tie && tie <= 1.0);
    assert!(rep["value_regret"].as_f64().unwrap() >= -1e-6);
}

#[test]
fn sampled_experiments_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let dist = format!(
        r#"{{"distribution": {{"n_episodes": 10, "horizon": 40, "start": "uniform", "also": [{DRS_ENERGY}]}}}}"#
    );
    let inv = r#"{"invariance": {"potential": {"variant": "energy_error", "target_multiplier": 2.0},
        "random_mdps": {"count": 3, "n_states": 6, "n_actions": 2, "gammas": [0.0, 0.9]}}}"#;
    let sweep = r#"{"sweep": {"terms": [{"name": "energy", "potential": {"variant": "energy_error", "target_multiplier": 1.0},
        "weight": -1.0, "mode": "drs"}], "multipliers": [0.5, 2.0]}}"#;
    for (cmd, rewards, exp) in [
        ("distribution", PBRS_ENERGY, dist.as_str()),
        ("invariance", SPARSE, inv),
        ("sweep", SPARSE, sweep),
    ] {
        let cfg = write(
            tmp.path(),
            &format!("{cmd}.json"),
            &small_pendulum(rewards, exp, ",\n  \"seed\": 17"),
        );
        let (a, b) = (
            tmp.path().join(format!("{cmd}_a")),
            tmp.path().join(format!("{cmd}_b")),
        );
        for out in [&a, &b] {
            let o = run(cmd, &cfg, out, &cache);
            assert_eq!(
                o.status.code(),
                Some(0),
                "{cmd}: {}",
                String::from_utf8_lossy(&o.stderr)
            );
        }
        assert_same_artifacts(&a, &b);
    }
    let inv: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(tmp.path().join("invariance_a/invariance.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(inv["passed"], true);
    assert_eq!(inv["random"].as_array().unwrap().len(), 6);
    let sweep = fs::read_to_string(tmp.path().join("sweep_a/sweep.csv")).unwrap();
    // 0.5, 1 (anchor), 2 in both modes
    assert_eq!(sweep.lines().count(), 1 + 6);
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let exp = r#"{"distribution": {"n_episodes": 5, "horizon": 30}}"#;
    let cfg = write(tmp.path(), "d.json", &small_pendulum(PBRS_ENERGY, exp, ""));
    let out = tmp.path().join("o");
    // no seed anywhere: config error
    assert_eq!(
        run("distribution", &cfg, &out, &cache).status.code(),
        Some(2)
    );
    let o = shapelab(
        &[
            "distribution",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "3",
            "--jobs",
            "2",
        ],
        &cache,
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(manifest(&out)["config"]["seed"], 3);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let out = tmp.path().join("o");

    let bad_gamma =
        small_pendulum(SPARSE, r#"{"solve": {}}"#, "").replace("\"gamma\": 0.95", "\"gamma\": 1.5");
    let cfg = write(tmp.path(), "g.json", &bad_gamma);
    let o = run("solve", &cfg, &out, &cache);
    assert_eq!(o.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&o.stderr);
    assert!(msg.contains("g.json:11:") && msg.contains("gamma"), "{msg}");

    let broken =
        small_pendulum(SPARSE, r#"{"solve": {}}"#, "").replace("\"tol\": 1e-8,", "\"tol\": ,");
    let cfg = write(tmp.path(), "s.json", &broken);
    let o = run("solve", &cfg, &out, &cache);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 11"));

    let cfg = write(
        tmp.path(),
        "m.json",
        &small_pendulum(SPARSE, r#"{"solve": {}}"#, ""),
    );
    assert_eq!(run("sweep", &cfg, &out, &cache).status.code(), Some(2));

    assert_eq!(
        run("solve", &tmp.path().join("missing.json"), &out, &cache)
            .status
            .code(),
        Some(4)
    );

    let blocked = write(tmp.path(), "file", "");
    assert_eq!(
        run("solve", &cfg, &blocked.join("sub"), &cache)
            .status
            .code(),
        Some(4)
    );

    let slow = small_pendulum(SPARSE, r#"{"solve": {}}"#, "")
        .replace("\"max_iter\": 100000", "\"max_iter\": 3");
    let cfg = write(tmp.path(), "n.json", &slow);
    let o = run("solve", &cfg, &out, &cache);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(manifest(&out)["status"], "not_converged");
    assert!(out.join("value.csv").exists());
}

#[test]
fn shipped_configs_round_trip_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        let cfg = ExperimentConfig::from_json(&text).unwrap();
        cfg.validate()
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg, "{}", path.display());
        n += 1;
    }
    assert!(n >= 10);
}

#[test]
fn gridworld_solve_exports_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/gridworld_solve.json");
    let out = tmp.path().join("o");
    assert_eq!(
        run("solve", &cfg, &out, &tmp.path().join("cache"))
            .status
            .code(),
        Some(0)
    );
    let value = read_csv(&out.join("value.csv"));
    assert_eq!(value.len(), 6);
    // the cell one step from the goal is worth the goal reward
    assert_eq!(value[5][4], "1");
}
