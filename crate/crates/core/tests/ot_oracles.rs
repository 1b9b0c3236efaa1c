mod common;

use common::*;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng;
use wjdot::ot::{solve_exact, CostMatrix, Sinkhorn};

fn weights(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from(random_simplex(r, n, 0.01))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_matches_assignment_enumeration(seed in any::<u64>(), n in 1usize..=6) {
        let mut r = rng(seed);
        let c = random_cost(&mut r, n, n);
        let w = uniform(n);
        let plan = solve_exact(w.view(), w.view(), &c).unwrap();
        let brute = brute_force_assignment(c.entries());
        prop_assert!((plan.cost - brute).abs() <= 1e-8 * brute.max(1e-12));
    }

    /// Complementary slackness certificate: feasible duals whose objective
    /// equals the primal cost prove optimality without a second solver.
    #[test]
    fn exact_plan_comes_with_an_optimality_certificate(seed in any::<u64>(), m in 1usize..12, n in 1usize..12) {
        let mut r = rng(seed);
        let c = random_cost(&mut r, m, n);
        let (mu, nu) = (weights(&mut r, m), weights(&mut r, n));
        let plan = solve_exact(mu.view(), nu.view(), &c).unwrap();
        prop_assert!(plan.marginal_violation(mu.view(), nu.view()) < 1e-12);
        prop_assert!(plan.coupling.iter().all(|p| *p >= 0.0));
        for i in 0..m {
            for k in 0..n {
                prop_assert!(plan.dual_u[i] + plan.dual_v[k] <= c.entries()[[i, k]] + 1e-9);
            }
        }
        prop_assert!((plan.cost - plan.dual_objective(mu.view(), nu.view())).abs() < 1e-9);
        prop_assert!(mu.dot(&plan.dual_u).abs() < 1e-9);
    }

    #[test]
    fn exact_cost_is_invariant_to_reordering_atoms(seed in any::<u64>(), m in 2usize..9, n in 2usize..9) {
        let mut r = rng(seed);
        let c = random_cost(&mut r, m, n);
        let (mu, nu) = (weights(&mut r, m), weights(&mut r, n));
        let base = solve_exact(mu.view(), nu.view(), &c).unwrap().cost;
        let rows: Vec<usize> = (0..m).rev().collect();
        let cols: Vec<usize> = (0..n).map(|k| (k + 1) % n).collect();
        let c2 = CostMatrix::new(Array2::from_shape_fn((m, n), |(i, k)| c.entries()[[rows[i], cols[k]]])).unwrap();
        let mu2: Array1<f64> = rows.iter().map(|&i| mu[i]).collect();
        let nu2: Array1<f64> = cols.iter().map(|&k| nu[k]).collect();
        let moved = solve_exact(mu2.view(), nu2.view(), &c2).unwrap().cost;
        prop_assert!((base - moved).abs() < 1e-12 * base.max(1.0));
        let swapped = solve_exact(nu.view(), mu.view(), &c.transposed()).unwrap().cost;
        prop_assert!((base - swapped).abs() < 1e-12 * base.max(1.0));
    }

    #[test]
    fn sinkhorn_is_feasible_and_never_below_exact(seed in any::<u64>(), m in 2usize..20, n in 2usize..20) {
        let mut r = rng(seed);
        let c = random_cost(&mut r, m, n);
        let (mu, nu) = (weights(&mut r, m), weights(&mut r, n));
        let rel = [1e-1, 1e-2][r.random_range(0..2)];
        let s = Sinkhorn::new(rel * c.mean()).solve(mu.view(), nu.view(), &c).unwrap();
        let e = solve_exact(mu.view(), nu.view(), &c).unwrap();
        prop_assert!(s.marginal_violation(mu.view(), nu.view()) < 1e-7);
        prop_assert!(s.cost >= e.cost - 1e-9);
        prop_assert!(s.dual_u.iter().chain(s.dual_v.iter()).all(|v| v.is_finite()));
    }
}

#[test]
fn label_loss_gradient_matches_central_differences() {
    for seed in 0..20 {
        let err = label_loss_gradient_error(seed);
        assert!(err <= 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn alpha_gradient_matches_resolved_differences() {
    for seed in 0..20 {
        let err = alpha_gradient_error(100 + seed);
        assert!(err <= 1e-3, "seed {seed}: absolute error {err:e}");
    }
}
