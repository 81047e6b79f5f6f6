mod common;

use common::{entropic_dual_oracle, median, random_matrix};
use conclu::diff::Tensor;
use conclu::seed;
use conclu::transport::exact::transport_lp_oracle;
use conclu::transport::{
    dual_objective, entropic_objective, pseudo_labels, sinkhorn, sinkhorn_trace, sinkhorn_with,
    transport_cost, Domain, SinkhornOptions,
};
use proptest::prelude::*;
use rand::Rng;

fn converged(eps: f64) -> SinkhornOptions {
    SinkhornOptions {
        epsilon: eps,
        iters: 2_000_000,
        tolerance: Some(1e-15),
        domain: Domain::Auto,
    }
}

#[test]
fn small_problem_matches_dual_ascent_oracle() {
    let mut rng = seed::rng(31);
    for _ in 0..10 {
        let d = random_matrix(&mut rng, 3, 2);
        let plan = sinkhorn_with(&d, &converged(0.05)).unwrap();
        let (oracle, _) = entropic_dual_oracle(&d, 0.05, 1e-12, 10_000_000);
        for (a, b) in plan.gamma_joint.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn sinkhorn_cost_approaches_the_lp_optimum() {
    let mut rng = seed::rng(32);
    for _ in 0..10 {
        let d = random_matrix(&mut rng, 3, 2);
        let eps = 1e-4 * median(d.data());
        let plan = sinkhorn_with(&d, &converged(eps)).unwrap();
        let lp = transport_lp_oracle(&d).unwrap();
        let cost = transport_cost(&plan.gamma_joint, &d);
        assert!(
            (cost - lp.cost).abs() <= 0.01 * lp.cost,
            "{cost} vs {}",
            lp.cost
        );
    }
}

#[test]
fn plain_and_log_domains_agree() {
    let mut rng = seed::rng(33);
    for _ in 0..20 {
        let (n, j) = (rng.random_range(2..50), rng.random_range(2..10));
        let d = random_matrix(&mut rng, n, j);
        let eps = rng.random_range(0.01..0.5);
        let run = |domain| {
            let opts = SinkhornOptions {
                epsilon: eps,
                iters: 20,
                tolerance: None,
                domain,
            };
            sinkhorn_with(&d, &opts).unwrap()
        };
        let (plain, log) = (run(Domain::Plain), run(Domain::Log));
        assert!(!plain.log_domain && log.log_domain);
        for (a, b) in plain.gamma_joint.data().iter().zip(log.gamma_joint.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn dual_objective_never_decreases_per_sweep() {
    let mut rng = seed::rng(34);
    for _ in 0..20 {
        let (n, j) = (rng.random_range(2..40), rng.random_range(2..8));
        let d = random_matrix(&mut rng, n, j);
        let eps = [0.01, 0.05, 0.2][rng.random_range(0..3)];
        let opts = SinkhornOptions {
            epsilon: eps,
            iters: 40,
            ..SinkhornOptions::default()
        };
        let trace = sinkhorn_trace(&d, &opts).unwrap();
        let dual: Vec<f64> = trace.iter().map(|g| dual_objective(g, &d, eps)).collect();
        for w in dual.windows(2) {
            assert!(w[1] >= w[0] - 1e-10, "{} -> {}", w[0], w[1]);
        }
        // weak duality: the dual stays below the primal of the converged plan
        let best = sinkhorn_with(&d, &converged(eps)).unwrap();
        let primal = entropic_objective(&best.gamma_joint, &d, eps);
        assert!(dual.iter().all(|v| *v <= primal + 1e-10));
    }
}

#[test]
fn plan_rows_follow_row_permutations() {
    let mut rng = seed::rng(35);
    let d = random_matrix(&mut rng, 7, 3);
    let perm = [3usize, 0, 6, 1, 5, 2, 4];
    let permuted =
        Tensor::from_rows(&perm.iter().map(|&i| d.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let a = sinkhorn(&d, 0.05, 20).unwrap();
    let b = sinkhorn(&permuted, 0.05, 20).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        for (x, y) in a.gamma_joint.row(i).iter().zip(b.gamma_joint.row(k)) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}

#[test]
fn pseudo_label_columns_sum_to_n_over_j() {
    let mut rng = seed::rng(36);
    let d = random_matrix(&mut rng, 50, 5);
    let gamma = pseudo_labels(&sinkhorn(&d, 0.05, 20).unwrap());
    for c in 0..5 {
        let s: f64 = (0..50).map(|i| gamma.at(i, c)).sum();
        assert!((s - 10.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plans_are_non_negative_with_exact_columns(
        n in 2usize..30, j in 2usize..6, eps in 1e-3f64..1.0, s in any::<u64>()
    ) {
        let mut rng = seed::rng(s);
        let d = random_matrix(&mut rng, n, j);
        let plan = sinkhorn(&d, eps, 20).unwrap();
        prop_assert!(plan.gamma_joint.data().iter().all(|v| *v >= 0.0));
        prop_assert!(plan.col_deviation() < 1e-15);
        let total: f64 = plan.gamma_joint.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lp_oracle_never_beats_an_entropic_plan_cost(s in any::<u64>()) {
        let mut rng = seed::rng(s);
        let (n, j) = (rng.random_range(1..=5), rng.random_range(1..=4));
        let d = random_matrix(&mut rng, n, j);
        let lp = transport_lp_oracle(&d).unwrap();
        let plan = sinkhorn_with(&d, &converged(0.1)).unwrap();
        prop_assert!(lp.cost <= transport_cost(&plan.gamma_joint, &d) + 1e-12);
    }
}
