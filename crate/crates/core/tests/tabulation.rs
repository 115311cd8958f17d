use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapelab::analysis::closed_loop_rollout;
use shapelab::dynamics::{PendState, PendulumParams};
use shapelab::shaping::{BaseReward, RewardSpec};
use shapelab::solver::q_value_iteration;
use shapelab::tabulation::{build_grid, tabulate_pendulum, GridSpec, InterpMode};

#[test]
fn interp_weights_partition_of_unity() {
    let grid = build_grid(&GridSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100_000 {
        let mut x = [rng.random_range(-4.0..4.0), rng.random_range(-9.0..9.0)];
        grid.clamp(&mut x);
        let w = grid.interp_weights(&x);
        assert!(!w.is_empty() && w.len() <= 4);
        assert!(w.iter().all(|&(_, p)| p > 0.0 && p <= 1.0));
        let total: f64 = w.iter().map(|&(_, p)| p).sum();
        assert!((total - 1.0).abs() <= 1e-12, "{x:?}: {total}");
        // reproduces the non-periodic coordinate exactly up to rounding
        let td: f64 = w.iter().map(|&(i, p)| p * grid.coords(i)[1]).sum();
        assert!((td - x[1]).abs() < 1e-9);
    }
}

#[test]
fn tabulated_rows_are_distributions() {
    let mdp = tabulate_pendulum(
        &PendulumParams::default(),
        &GridSpec::pendulum(51, 51, 11),
        InterpMode::Multilinear,
    )
    .unwrap();
    assert_eq!(mdp.n_states(), 51 * 51);
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let row = mdp.row(s, a);
            assert!(row.iter().all(|t| t.prob > 0.0 && t.next < mdp.n_states()));
            assert!(row.windows(2).all(|w| w[0].next < w[1].next));
            let total: f64 = row.iter().map(|t| t.prob).sum();
            assert!((total - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn tabulation_ignores_thread_count() {
    let p = PendulumParams::default();
    let spec = GridSpec::pendulum(41, 37, 7);
    let build = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| tabulate_pendulum(&p, &spec, InterpMode::Multilinear).unwrap())
    };
    let one = build(1);
    let three = build(3);
    assert_eq!(one, three);
    let mut a = Vec::new();
    let mut b = Vec::new();
    one.write_binary(&mut a).unwrap();
    three.write_binary(&mut b).unwrap();
    assert_eq!(a, b);
}

fn swing_up_steps(n: usize) -> usize {
    let p = PendulumParams::default();
    let spec = GridSpec::pendulum(n, n, 21);
    let mdp = tabulate_pendulum(&p, &spec, InterpMode::Multilinear).unwrap();
    let rewards = RewardSpec::base_only(BaseReward::PendulumSparse);
    let (q, report) = q_value_iteration(&mdp, &rewards, 0.99, 1e-8, 100_000).unwrap();
    assert!(report.converged);
    let grid = build_grid(&spec).unwrap();
    let run = closed_loop_rollout(
        &grid,
        &q,
        &spec.actions.values(),
        &p,
        PendState::hanging(),
        400,
    )
    .unwrap();
    run.first_in_target.expect("swing-up reaches the target")
}

#[test]
fn refinement_consistency() {
    let coarse = swing_up_steps(101) as f64;
    let fine = swing_up_steps(201) as f64;
    assert!(
        (fine - coarse).abs() <= 0.2 * coarse,
        "101 grid: {coarse} steps, 201 grid: {fine} steps"
    );
}
