//! Projections checked against an exhaustive active-set oracle: every
//! subset of constraints is tried as the active set, its equality-
//! constrained projection solved in closed form, and the unique candidate
//! satisfying primal and dual feasibility kept.

use aggnash::{Halfspace, LocalSet};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Constraints `gₖᵀx ≤ cₖ`, box faces included.
fn rows(lower: &[f64], upper: &[f64], hs: &[(Vec<f64>, f64)]) -> Vec<(DVector<f64>, f64)> {
    let n = lower.len();
    let mut out = Vec::new();
    for k in 0..n {
        let mut e = DVector::zeros(n);
        e[k] = 1.0;
        out.push((e.clone(), upper[k]));
        out.push((-e, -lower[k]));
    }
    for (a, c) in hs {
        out.push((DVector::from_column_slice(a), *c));
    }
    out
}

fn oracle(y: &DVector<f64>, cons: &[(DVector<f64>, f64)]) -> Option<DVector<f64>> {
    let n = y.len();
    let m = cons.len();
    for mask in 0u32..(1 << m) {
        let active: Vec<usize> = (0..m).filter(|&k| mask & (1 << k) != 0).collect();
        if active.len() > n {
            continue;
        }
        // x = y − Gᵀμ with G x = c on the active rows
        let g = DMatrix::from_fn(active.len(), n, |r, k| cons[active[r]].0[k]);
        let c = DVector::from_iterator(active.len(), active.iter().map(|&k| cons[k].1));
        let mu = if active.is_empty() {
            DVector::zeros(0)
        } else {
            let Some(chol) = (&g * g.transpose()).cholesky() else { continue };
            chol.solve(&(&g * y - c))
        };
        if mu.iter().any(|&v| v < -1e-10) {
            continue;
        }
        let x = y - g.transpose() * &mu;
        if cons.iter().all(|(a, b)| a.dot(&x) <= b + 1e-10) {
            return Some(x);
        }
    }
    None
}

#[test]
fn projection_matches_active_set_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..300 {
        let n = 2 + trial % 3;
        let m = trial % 3;
        let lower: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..-0.5)).collect();
        let upper: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let hs: Vec<(Vec<f64>, f64)> = (0..m)
            .map(|_| ((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), rng.random_range(0.1..1.0)))
            .collect();
        let set = LocalSet::new(
            DVector::from_column_slice(&lower),
            DVector::from_column_slice(&upper),
            hs.iter().map(|(a, c)| Halfspace::from_dense(a, *c).unwrap()).collect(),
        )
        .unwrap();
        let cons = rows(&lower, &upper, &hs);
        let y = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
        let expected = oracle(&y, &cons).expect("nonempty set has a projection");
        let got = set.project(&y).unwrap();
        assert!((&got - &expected).amax() < 1e-8, "trial {trial}: {got} vs {expected}");
        let slow = set.project_dykstra(&y, 1e-13).unwrap();
        assert!((&slow - &expected).amax() < 1e-8, "trial {trial}: dykstra {slow} vs {expected}");
    }
}

#[test]
fn warm_started_sequence_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 4;
    let (lower, upper) = (vec![0.0; n], vec![1.0; n]);
    let hs = vec![(vec![1.0, 1.0, 1.0, 1.0], 1.5), (vec![1.0, -1.0, 0.0, 0.5], 0.2)];
    let set = LocalSet::new(
        DVector::from_column_slice(&lower),
        DVector::from_column_slice(&upper),
        hs.iter().map(|(a, c)| Halfspace::from_dense(a, *c).unwrap()).collect(),
    )
    .unwrap();
    let cons = rows(&lower, &upper, &hs);
    let mut warm = DVector::zeros(0);
    let mut y = DVector::from_element(n, 0.5);
    for _ in 0..200 {
        y += DVector::from_fn(n, |_, _| rng.random_range(-0.3..0.3));
        let got = set.project_warm(&y, 1e-12, &mut warm).unwrap();
        assert!((&got - oracle(&y, &cons).unwrap()).amax() < 1e-9);
    }
}
