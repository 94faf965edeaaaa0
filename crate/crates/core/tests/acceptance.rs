//! Acceptance criteria, one PASS/FAIL line each. Every tolerance is pinned
//! below; the run fails if any line fails.

use std::time::Instant;

use aggnash::config::ExperimentConfig;
use aggnash::cournot::{build_cournot_game, build_small_example, FirmSpec, MarketCapacity, PriceModel, TransportNetwork};
use aggnash::experiment::sweep;
use aggnash::quality::{epsilon_nash, feasibility_check, vi_residual, EpsilonOptions};
use aggnash::solver::{default_init, run_distributed, step_size_bound, CompactIteration, DistributedIteration, Iteration};
use aggnash::{CommMatrix, Direction, Halfspace, LocalSet, Mode, Rounds, SolverConfig, StopNorm, StrategyProfile};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BAR_TOL: f64 = 5e-3;
const PRODUCTION_TOL: f64 = 1e-3;
const RUNTIME_LIMIT_S: f64 = 60.0;
const COUPLING_RESIDUAL_TOL: f64 = 5e-2;
const EPS_REL_TOL: f64 = 0.30;
const BOUND_REL_TOL: f64 = 0.03;
const LIPSCHITZ_TOL: f64 = 1e-2;
const EQUIVALENCE_TOL: f64 = 1e-12;
const EQUIVALENCE_ITERS: usize = 500;
const SHAPE_NOISE: f64 = 0.10;
const DISTANCE_DECAY: f64 = 10.0;
const FD_REL_TOL: f64 = 1e-5;
const VI_TOL: f64 = 1e-2;

const UNCOUPLED_BARS: [[f64; 5]; 3] = [
    [3.29425274158038, 1.49205180615129, 0.114078278385911, 0.0995819408862545, 3.52156456322455e-05],
    [0.0442578236052739, 1.02552970067784, 2.8604249348974, 1.02552970067784, 0.044257823605274],
    [3.52156456322455e-05, 0.0995819408862545, 0.114078278385911, 1.49205180615129, 3.29425274158038],
];

const COUPLED_BARS: [[f64; 5]; 3] = [
    [3.44356081028404, 1.41722429616991, 3.61474362928216e-06, 0.137946778993244, 0.00126433281767803],
    [0.248983568785253, 1.73600789535927, 1.03001689461111, 1.73600789535927, 0.248983568785253],
    [0.00126433281767803, 0.137946778993244, 3.61474362928216e-06, 1.41722429616991, 3.44356081028404],
];

struct Ledger {
    lines: Vec<(bool, String)>,
}

impl Ledger {
    fn record(&mut self, id: &str, ok: bool, detail: String) {
        let line = format!("[{}] {id}: {detail}", if ok { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((ok, line));
    }
}

fn small_solver(stop_tol: f64) -> SolverConfig {
    SolverConfig {
        tau: 0.005,
        nu: 10,
        stop_tol,
        stop_norm: StopNorm::Euclidean,
        ..SolverConfig::default()
    }
}

fn worst_bar_error(sales: &[DVector<f64>], bars: &[[f64; 5]; 3]) -> f64 {
    sales
        .iter()
        .zip(bars)
        .flat_map(|(y, b)| y.iter().zip(b).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max)
}

fn criterion_bars(ledger: &mut Ledger, id: &str, coupled: bool, bars: &[[f64; 5]; 3]) {
    let (cg, t) = build_small_example(coupled).unwrap();
    let start = Instant::now();
    let report = run_distributed(&cg.game, &t, &small_solver(1e-4), None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let bar = worst_bar_error(&cg.sales(&report.profile), bars);
    let prod = cg.production(&report.profile).iter().map(|r| (r - 5.0).abs()).fold(0.0, f64::max);
    ledger.record(
        &format!("{id}a bars"),
        report.converged && bar <= BAR_TOL,
        format!("max |y - paper| = {bar:.3e} (tol {BAR_TOL:e}) after {} iterations", report.iterations),
    );
    if !coupled {
        ledger.record(&format!("{id}b production"), prod <= PRODUCTION_TOL, format!("max |r - 5| = {prod:.3e} (tol {PRODUCTION_TOL:e})"));
        ledger.record(&format!("{id}c runtime"), secs < RUNTIME_LIMIT_S, format!("{secs:.2} s (limit {RUNTIME_LIMIT_S} s)"));
    } else {
        let loose = feasibility_check(&cg.game, &report.profile, COUPLING_RESIDUAL_TOL).unwrap();
        let tight_run = run_distributed(&cg.game, &t, &small_solver(1e-6), None).unwrap();
        let tight = feasibility_check(&cg.game, &tight_run.profile, COUPLING_RESIDUAL_TOL).unwrap();
        ledger.record(
            &format!("{id}b coupling residual"),
            loose.coupling_residual <= COUPLING_RESIDUAL_TOL && tight.coupling_residual < loose.coupling_residual,
            format!(
                "{:.3e} at stop 1e-4 (tol {COUPLING_RESIDUAL_TOL:e}), {:.3e} at stop 1e-6",
                loose.coupling_residual, tight.coupling_residual
            ),
        );
    }
}

fn criterion_epsilon(ledger: &mut Ledger) {
    for (coupled, paper) in [(false, 0.0014), (true, 0.0035)] {
        let (cg, t) = build_small_example(coupled).unwrap();
        let report = run_distributed(&cg.game, &t, &small_solver(1e-4), None).unwrap();
        let opts = EpsilonOptions {
            feasibility_tol: COUPLING_RESIDUAL_TOL,
            ..EpsilonOptions::default()
        };
        let q = epsilon_nash(&cg.game, &report.profile, &opts).unwrap();
        let rel = (q.eps_rel - paper).abs() / paper;
        ledger.record(
            &format!("3{} eps_rel {}", if coupled { "b" } else { "a" }, if coupled { "coupled" } else { "uncoupled" }),
            rel <= EPS_REL_TOL,
            format!("{:.4e} vs paper {paper} (relative error {rel:.2}, tol {EPS_REL_TOL})", q.eps_rel),
        );
    }
}

fn criterion_constants(ledger: &mut Ledger) {
    for (id, (alpha, lip, paper)) in [("4a", (0.0185, 9.9124, 1.8e-4)), ("4b", (0.003, 12.89, 1.8e-5))] {
        let b = step_size_bound(alpha, lip, 1.0).unwrap();
        let rel = (b.tau_max - paper).abs() / paper;
        ledger.record(
            &format!("{id} step bound"),
            rel <= BOUND_REL_TOL,
            format!("{:.4e} vs paper {paper:e} (relative error {:.2}%, tol {}%)", b.tau_max, rel * 100.0, BOUND_REL_TOL * 100.0),
        );
    }
    let (cg, t) = build_small_example(true).unwrap();
    let c = cg.constants(&t, Rounds::Finite(10)).unwrap();
    let alpha_ok = format!("{:.4}", c.alpha) == "0.0185";
    ledger.record(
        "4c constants small",
        alpha_ok && (c.lipschitz - 9.9124).abs() <= LIPSCHITZ_TOL,
        format!("alpha = {:.6}, L = {:.5} (paper 0.0185, 9.9124 +/- {LIPSCHITZ_TOL:e})", c.alpha, c.lipschitz),
    );
    let cfg = ExperimentConfig::parse("seed = 2018\n[game]\nsource = \"network\"\nsynthetic = { vertices = 43, roads = 51 }\n").unwrap();
    let (big, ring) = cfg.build().unwrap();
    let a = big.constants(&ring, Rounds::Finite(4)).unwrap().alpha;
    ledger.record("4d constants large", format!("{a:.3}") == "0.003", format!("alpha = {a:.6} (paper 0.003)"));
}

/// Random doubly stochastic, asymmetric and primitive.
fn random_asymmetric(rng: &mut ChaCha8Rng, n: usize) -> CommMatrix {
    let mut m = DMatrix::from_fn(n, n, |i, j| if j == (i + 1) % n { 0.35 } else if i == j { 0.25 } else { 0.0 });
    for w in [0.25, 0.15] {
        let mut perm: Vec<usize> = (0..n).collect();
        for k in (1..n).rev() {
            perm.swap(k, rng.random_range(0..=k));
        }
        m += DMatrix::from_fn(n, n, |i, j| if perm[i] == j { w } else { 0.0 });
    }
    CommMatrix::new(m).unwrap()
}

fn max_deviation(game: &aggnash::Game, t: &CommMatrix, cfg: &SolverConfig) -> f64 {
    let (x0, l0) = default_init(game).unwrap();
    let mut dist = DistributedIteration::new(game, t, cfg, x0.clone(), l0.clone()).unwrap();
    let mut compact = CompactIteration::new(game, t, cfg, x0, l0).unwrap();
    let mut worst = 0.0_f64;
    for _ in 0..EQUIVALENCE_ITERS {
        dist.step().unwrap();
        compact.step().unwrap();
        worst = worst.max(dist.primal().max_abs_diff(&compact.primal()));
        for (a, b) in dist.duals().iter().zip(compact.duals()) {
            worst = worst.max((a - b).amax());
        }
    }
    worst
}

fn criterion_equivalence(ledger: &mut Ledger) {
    let cfg = SolverConfig {
        projection_tol: 1e-14,
        ..small_solver(1e-300)
    };
    let (small, t) = build_small_example(true).unwrap();
    let d_small = max_deviation(&small.game, &t, &cfg);

    let net = TransportNetwork::chain(4).unwrap();
    let firms = [0, 1, 2, 3, 0, 2].iter().map(|&loc| FirmSpec::canonical(loc, 3.0, &net, 2.0, 1.0, false)).collect();
    let price = PriceModel::affine(DMatrix::identity(4, 4), DVector::from_element(4, 8.0)).unwrap();
    let six = build_cournot_game(&net, firms, price, MarketCapacity::Rows(vec![(1, 0.5), (3, 0.8)])).unwrap();
    let t6 = random_asymmetric(&mut ChaCha8Rng::seed_from_u64(42), 6);
    assert!(!t6.is_symmetric() && t6.validate().unwrap().ok());
    let d_six = max_deviation(&six.game, &t6, &SolverConfig { nu: 3, ..cfg });
    ledger.record(
        "5 distributed = compact",
        d_small < EQUIVALENCE_TOL && d_six < EQUIVALENCE_TOL,
        format!("max deviation over {EQUIVALENCE_ITERS} iterations: small {d_small:.2e}, N=6 asymmetric {d_six:.2e} (tol {EQUIVALENCE_TOL:e})"),
    );
}

fn nonincreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] <= w[0] * (1.0 + SHAPE_NOISE))
}

fn criterion_sweep_shape(ledger: &mut Ledger) {
    let cfg = ExperimentConfig::parse(
        "seed = 2018\n\
         [game]\nsource = \"network\"\nsynthetic = { vertices = 43, roads = 51 }\n\
         [solver]\ntau = 0.05\nstop_tol = 1e-4\nstop_norm = \"euclidean\"\n\
         [sweep]\nnu = [2, 4, 6, 8, 10, 12, 14, 16, 18, 20]\n\
         [quality]\nfeasibility_tol = 1e-2\n",
    )
    .unwrap();
    let (game, ring) = cfg.build().unwrap();
    let start = Instant::now();
    let out = sweep(&cfg, &game, &ring).unwrap();
    let eps: Vec<f64> = out.rows.iter().map(|r| r.eps_rel.unwrap_or(f64::NAN)).collect();
    let dist: Vec<f64> = out.rows.iter().map(|r| r.distance.unwrap_or(f64::NAN)).collect();
    for r in &out.rows {
        println!(
            "      nu = {:2}: eps_rel = {:.4e}, distance = {:.4e}, iterations = {}{}",
            r.nu,
            r.eps_rel.unwrap_or(f64::NAN),
            r.distance.unwrap_or(f64::NAN),
            r.iterations,
            r.error.as_deref().map(|e| format!(", error: {e}")).unwrap_or_default()
        );
    }
    let all_ok = out.rows.iter().all(|r| r.converged && r.error.is_none());
    let decay = dist[0] / dist[dist.len() - 1];
    ledger.record(
        "6 sweep shape",
        all_ok && nonincreasing(&eps) && nonincreasing(&dist) && decay >= DISTANCE_DECAY,
        format!(
            "eps_rel {:.3e} -> {:.3e}, distance {:.3e} -> {:.3e} (decay {decay:.1}x, need {DISTANCE_DECAY}x; noise {SHAPE_NOISE}) in {:.0} s",
            eps[0],
            eps[eps.len() - 1],
            dist[0],
            dist[dist.len() - 1],
            start.elapsed().as_secs_f64()
        ),
    );
}

fn criterion_properties(ledger: &mut Ledger) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // gradient oracles against central differences of the costs
    let (cg, t) = build_small_example(false).unwrap();
    let game = &cg.game;
    let mut fd_worst = 0.0_f64;
    for _ in 0..100 {
        let x = game.sample_profile(&mut rng, 1000).unwrap();
        let f = game.eval_operator(&t, Rounds::Finite(10), &x, Mode::Nash).unwrap();
        for i in 0..game.num_agents() {
            let h = 1e-6 * (1.0 + x[i].norm());
            let cost_at = |xi: &DVector<f64>| {
                let mut y = x.clone();
                y.0[i] = xi.clone();
                let (s, _) = game.aggregates(&t, Rounds::Finite(10), &y).unwrap();
                game.agent(i).cost.value(xi, &s[i]).unwrap()
            };
            let fd = DVector::from_fn(x[i].len(), |k, _| {
                let (mut p, mut m) = (x[i].clone(), x[i].clone());
                p[k] += h;
                m[k] -= h;
                (cost_at(&p) - cost_at(&m)) / (2.0 * h)
            });
            fd_worst = fd_worst.max((&f[i] - fd).norm() / f[i].norm().max(1.0));
        }
    }
    ledger.record("7a gradient oracle", fd_worst < FD_REL_TOL, format!("worst relative error {fd_worst:.2e} over 100 points (tol {FD_REL_TOL:e})"));

    // projection: variational characterization and nonexpansiveness
    let mut proj_fail = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..7);
        let hs = (0..rng.random_range(0..4))
            .map(|_| {
                let row: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                Halfspace::from_dense(&row, rng.random_range(0.2..1.5)).unwrap()
            })
            .collect();
        let set = LocalSet::new(DVector::from_element(n, -1.0), DVector::from_element(n, 1.5), hs).unwrap();
        let a = DVector::from_fn(n, |_, _| rng.random_range(-4.0..4.0));
        let b = DVector::from_fn(n, |_, _| rng.random_range(-4.0..4.0));
        let (pa, pb) = (set.project(&a).unwrap(), set.project(&b).unwrap());
        let mut z = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        while !set.contains(&z, 0.0) {
            z *= 0.5;
        }
        let vi = (&a - &pa).dot(&(&z - &pa)) <= 1e-8;
        let nonexp = (&pa - &pb).norm() <= (&a - &b).norm() + 1e-8;
        if !(vi && nonexp && set.contains(&pa, 1e-9)) {
            proj_fail += 1;
        }
    }
    ledger.record("7b projection", proj_fail == 0, format!("{proj_fail} failures over 1000 random pairs"));

    // consensus: semigroup and gap monotonicity
    let t6 = random_asymmetric(&mut rng, 6);
    let vals: Vec<DVector<f64>> = (0..6).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-5.0..5.0))).collect();
    let mut semigroup = 0.0_f64;
    for (a, b) in [(0, 3), (2, 5), (4, 4), (7, 1)] {
        let split = t6.consensus_rounds(&t6.consensus_rounds(&vals, a, Direction::In).unwrap(), b, Direction::In).unwrap();
        let whole = t6.consensus_rounds(&vals, a + b, Direction::In).unwrap();
        semigroup = split.iter().zip(&whole).fold(semigroup, |m, (s, w)| m.max((s - w).amax()));
    }
    let gaps: Vec<f64> = (0..40).map(|nu| t6.consensus_gap(nu)).collect();
    let gap_mono = gaps.windows(2).all(|w| w[1] <= w[0] + 1e-14);
    ledger.record(
        "7c consensus",
        semigroup < 1e-12 && gap_mono,
        format!("semigroup deviation {semigroup:.1e}, gap nonincreasing over 40 rounds: {gap_mono}"),
    );

    // duals stay nonnegative over a full coupled run
    let (coupled, tc) = build_small_example(true).unwrap();
    let cfg = small_solver(1e-4);
    let (x0, l0) = default_init(&coupled.game).unwrap();
    let mut it = DistributedIteration::new(&coupled.game, &tc, &cfg, x0, l0).unwrap();
    let mut min_dual = f64::INFINITY;
    let mut steps = 0;
    loop {
        let d = it.step().unwrap();
        steps += 1;
        min_dual = it.states().iter().flat_map(|s| s.lambda.iter().copied()).fold(min_dual, f64::min);
        if d.in_norm(cfg.stop_norm) < cfg.stop_tol {
            break;
        }
    }
    ledger.record("7d duals nonnegative", min_dual >= 0.0, format!("min dual {min_dual:.2e} over {steps} iterations"));

    // symmetric T with even rounds gives a strongly monotone operator
    let alphas: Vec<f64> = [2, 4, 10]
        .iter()
        .map(|&nu| cg.game.estimate_monotonicity(&t, Rounds::Finite(nu), 8, nu as u64).unwrap())
        .collect();
    ledger.record(
        "7e even rounds monotone",
        t.is_symmetric() && alphas.iter().all(|&a| a > 0.0),
        format!("sampled alpha at nu = 2, 4, 10: {}", alphas.iter().map(|a| format!("{a:.3e}")).collect::<Vec<_>>().join(", ")),
    );

    // one agent: the iteration is plain projected gradient
    let agent = cg.game.agent(0).clone();
    let set = agent.set.clone();
    let single = aggnash::Game::new(vec![agent], aggnash::Coupling::none(5)).unwrap();
    let one = CommMatrix::identity(1);
    let cfg1 = SolverConfig {
        tau: 0.02,
        nu: 1,
        stop_tol: 1e-300,
        max_iter: 100,
        projection_tol: 1e-13,
        ..SolverConfig::default()
    };
    let (x0, l0) = default_init(&single).unwrap();
    let mut it = DistributedIteration::new(&single, &one, &cfg1, x0, l0).unwrap();
    let mut x = DVector::zeros(set.dim());
    let mut pg_worst = 0.0_f64;
    for _ in 0..cfg1.max_iter {
        it.step().unwrap();
        let g = single.eval_operator(&one, Rounds::Infinite, &StrategyProfile(vec![x.clone()]), Mode::Nash).unwrap();
        x = set.project_tol(&(&x - &g[0] * cfg1.tau), 1e-13).unwrap();
        pg_worst = pg_worst.max((&it.primal()[0] - &x).amax());
    }
    ledger.record("7f single agent", pg_worst < 1e-10, format!("step-for-step deviation {pg_worst:.1e} over 100 steps"));
}

fn criterion_vi(ledger: &mut Ledger) {
    for coupled in [false, true] {
        let (cg, t) = build_small_example(coupled).unwrap();
        let residual = |stop: f64| {
            let r = run_distributed(&cg.game, &t, &small_solver(stop), None).unwrap();
            assert!(r.converged);
            vi_residual(&cg.game, &t, Rounds::Finite(10), &r.profile, Mode::Nash).unwrap()
        };
        let (loose, tight) = (residual(1e-4), residual(1e-6));
        let tag = if coupled { "coupled" } else { "uncoupled" };
        ledger.record(
            &format!("8{} vi residual {tag}", if coupled { "c" } else { "a" }),
            loose < VI_TOL,
            format!("{loose:.3e} at stop 1e-4 (tol {VI_TOL:e})"),
        );
        ledger.record(
            &format!("8{} vi residual decreases {tag}", if coupled { "d" } else { "b" }),
            tight < loose,
            format!("{tight:.3e} at stop 1e-6 < {loose:.3e}"),
        );
    }
}

#[test]
fn acceptance() {
    let mut ledger = Ledger { lines: Vec::new() };
    criterion_bars(&mut ledger, "1", false, &UNCOUPLED_BARS);
    criterion_bars(&mut ledger, "2", true, &COUPLED_BARS);
    criterion_epsilon(&mut ledger);
    criterion_constants(&mut ledger);
    criterion_equivalence(&mut ledger);
    criterion_sweep_shape(&mut ledger);
    criterion_properties(&mut ledger);
    criterion_vi(&mut ledger);
    let failed: Vec<&String> = ledger.lines.iter().filter(|(ok, _)| !ok).map(|(_, l)| l).collect();
    println!("{} of {} checks pass", ledger.lines.len() - failed.len(), ledger.lines.len());
    assert!(failed.is_empty(), "failing criteria:\n{}", failed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("\n"));
}
