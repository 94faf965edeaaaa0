//! Randomized invariants of projections, consensus, game operators and the
//! solver.

use aggnash::cournot::{build_large_instance, build_price_matrix, build_ring_comm, build_small_example, synthetic_network, LARGE_MARKET_CAPACITY};
use aggnash::solver::{default_init, run_compact, run_distributed, DistributedIteration, Iteration};
use aggnash::{CommMatrix, Direction, Game, Halfspace, LocalSet, Mode, Rounds, SolverConfig, StrategyProfile};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random box-plus-halfspace set whose origin is strictly feasible.
fn random_set(rng: &mut ChaCha8Rng, n: usize, m: usize) -> LocalSet {
    let hs = (0..m)
        .map(|_| {
            let row: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            Halfspace::from_dense(&row, rng.random_range(0.2..1.5)).unwrap()
        })
        .collect();
    LocalSet::new(DVector::from_element(n, -1.0), DVector::from_element(n, 1.5), hs).unwrap()
}

fn random_point(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-spread..spread))
}

/// Random doubly stochastic matrix as a convex mix of permutations and the
/// identity; the identity weight keeps it primitive when a cycle is mixed in.
fn random_doubly_stochastic(rng: &mut ChaCha8Rng, n: usize) -> CommMatrix {
    let mut m = DMatrix::identity(n, n) * 0.3;
    let cycle = DMatrix::from_fn(n, n, |i, j| if j == (i + 1) % n { 1.0 } else { 0.0 });
    m += cycle * 0.3;
    let mut perm: Vec<usize> = (0..n).collect();
    for k in (1..n).rev() {
        perm.swap(k, rng.random_range(0..=k));
    }
    m += DMatrix::from_fn(n, n, |i, j| if perm[i] == j { 0.4 } else { 0.0 });
    CommMatrix::new(m).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn projection_is_nonexpansive(seed in any::<u64>(), n in 2usize..7, m in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = random_set(&mut rng, n, m);
        let a = random_point(&mut rng, n, 4.0);
        let b = random_point(&mut rng, n, 4.0);
        let (pa, pb) = (set.project(&a).unwrap(), set.project(&b).unwrap());
        prop_assert!((&pa - &pb).norm() <= (&a - &b).norm() + 1e-8);
    }

    #[test]
    fn projection_satisfies_the_variational_inequality(seed in any::<u64>(), n in 2usize..7, m in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = random_set(&mut rng, n, m);
        let x = random_point(&mut rng, n, 4.0);
        let p = set.project(&x).unwrap();
        prop_assert!(set.contains(&p, 1e-9));
        // a feasible witness: shrink a box point toward the strictly feasible origin
        let mut z = random_point(&mut rng, n, 1.0);
        while !set.contains(&z, 0.0) {
            z *= 0.5;
        }
        prop_assert!((&x - &p).dot(&(&z - &p)) <= 1e-8);
        prop_assert!((&x - &p).norm() <= (&x - &z).norm() + 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn consensus_rounds_compose(seed in any::<u64>(), n in 2usize..8, a in 0u32..6, b in 0u32..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_doubly_stochastic(&mut rng, n);
        let values: Vec<DVector<f64>> = (0..n).map(|_| random_point(&mut rng, 3, 5.0)).collect();
        for dir in [Direction::In, Direction::Out] {
            let split = t.consensus_rounds(&t.consensus_rounds(&values, a, dir).unwrap(), b, dir).unwrap();
            let whole = t.consensus_rounds(&values, a + b, dir).unwrap();
            for (s, w) in split.iter().zip(&whole) {
                prop_assert!((s - w).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn consensus_preserves_the_mean(seed in any::<u64>(), n in 2usize..8, nu in 0u32..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_doubly_stochastic(&mut rng, n);
        let values: Vec<DVector<f64>> = (0..n).map(|_| random_point(&mut rng, 2, 5.0)).collect();
        let mean = values.iter().sum::<DVector<f64>>() / n as f64;
        let mixed = t.consensus_rounds(&values, nu, Direction::In).unwrap();
        let after = mixed.iter().sum::<DVector<f64>>() / n as f64;
        prop_assert!((mean - after).amax() < 1e-12);
    }

    #[test]
    fn consensus_gap_never_grows(seed in any::<u64>(), n in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_doubly_stochastic(&mut rng, n);
        let gaps: Vec<f64> = (0..30).map(|nu| t.consensus_gap(nu)).collect();
        for w in gaps.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-14, "{gaps:?}");
        }
    }
}

/// Central difference of agent `i`'s cost in its own strategy, with the
/// aggregate it sees recomputed from the perturbed strategy.
fn fd_block(game: &Game, t: &CommMatrix, rounds: Rounds, x: &StrategyProfile, i: usize, mode: Mode) -> DVector<f64> {
    let sigma = |xi: &DVector<f64>| {
        let mut y = x.clone();
        y.0[i] = xi.clone();
        let (s, _) = game.aggregates(t, rounds, &y).unwrap();
        s[i].clone()
    };
    let base = sigma(&x[i]);
    let n = x[i].len();
    let h = 1e-6 * (1.0 + x[i].norm());
    DVector::from_fn(n, |k, _| {
        let (mut p, mut m) = (x[i].clone(), x[i].clone());
        p[k] += h;
        m[k] -= h;
        let cost = &game.agent(i).cost;
        match mode {
            Mode::Nash => (cost.value(&p, &sigma(&p)).unwrap() - cost.value(&m, &sigma(&m)).unwrap()) / (2.0 * h),
            // Wardrop freezes the aggregate
            Mode::Wardrop => (cost.value(&p, &base).unwrap() - cost.value(&m, &base).unwrap()) / (2.0 * h),
        }
    })
}

#[test]
fn operator_matches_finite_differences() {
    let (cg, t) = build_small_example(false).unwrap();
    let game = &cg.game;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0_f64;
    for sample in 0..100 {
        let x = game.sample_profile(&mut rng, 1000).unwrap();
        let rounds = if sample % 3 == 0 { Rounds::Infinite } else { Rounds::Finite(1 + sample as u32 % 7) };
        let mode = if sample % 4 == 3 { Mode::Wardrop } else { Mode::Nash };
        let f = game.eval_operator(&t, rounds, &x, mode).unwrap();
        for i in 0..game.num_agents() {
            let fd = fd_block(game, &t, rounds, &x, i, mode);
            worst = worst.max((&f[i] - &fd).norm() / f[i].norm().max(1.0));
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

#[test]
fn duals_stay_nonnegative_over_full_runs() {
    for coupled in [false, true] {
        let (cg, t) = build_small_example(coupled).unwrap();
        let cfg = SolverConfig {
            tau: 0.005,
            nu: 3,
            stop_tol: 1e-4,
            max_iter: 3000,
            ..SolverConfig::default()
        };
        let (x0, l0) = default_init(&cg.game).unwrap();
        let mut it = DistributedIteration::new(&cg.game, &t, &cfg, x0, l0).unwrap();
        for _ in 0..cfg.max_iter {
            it.step().unwrap();
            for s in it.states() {
                assert!(s.lambda.iter().all(|&l| l >= 0.0));
            }
        }
        let report = run_compact(&cg.game, &t, &cfg, None).unwrap();
        assert!(report.duals.iter().all(|l| l.iter().all(|&v| v >= 0.0)));
    }
}

/// With a symmetric matrix and an even number of rounds the ν-round
/// operator of the affine-price Cournot game is strongly monotone.
#[test]
fn even_rounds_on_symmetric_matrix_are_monotone() {
    let (small, small_t) = build_small_example(true).unwrap();
    assert!(small_t.is_symmetric());
    let net = synthetic_network(43, 51, 2018).unwrap();
    let big = build_large_instance(&net, LARGE_MARKET_CAPACITY).unwrap();
    let ring = build_ring_comm(5).unwrap();
    assert!(build_price_matrix(&net, 10.0, 1.0, 0.3).is_psd());
    for nu in [2, 4, 6] {
        let a = small.game.estimate_monotonicity(&small_t, Rounds::Finite(nu), 6, nu as u64).unwrap();
        assert!(a > 0.0, "small instance, nu = {nu}: {a:e}");
        let b = big.game.estimate_monotonicity(&ring, Rounds::Finite(nu), 3, nu as u64).unwrap();
        assert!(b > 0.0, "ring instance, nu = {nu}: {b:e}");
    }
}

#[test]
fn single_agent_run_is_projected_gradient() {
    let (cg, _) = build_small_example(false).unwrap();
    let agent = cg.game.agent(1).clone();
    let set = agent.set.clone();
    let game = Game::new(vec![agent], aggnash::Coupling::none(5)).unwrap();
    let t = CommMatrix::identity(1);
    let cfg = SolverConfig {
        tau: 0.01,
        nu: 1,
        stop_tol: 1e-300,
        max_iter: 50,
        projection_tol: 1e-13,
        ..SolverConfig::default()
    };
    let report = run_distributed(&game, &t, &cfg, None).unwrap();
    let mut x = DVector::zeros(set.dim());
    for _ in 0..cfg.max_iter {
        let p = StrategyProfile(vec![x.clone()]);
        let g = game.eval_operator(&t, Rounds::Infinite, &p, Mode::Nash).unwrap();
        x = set.project_tol(&(&x - &g[0] * cfg.tau), 1e-13).unwrap();
    }
    assert!((&report.profile[0] - &x).amax() < 1e-10, "{:e}", (&report.profile[0] - &x).amax());
}
