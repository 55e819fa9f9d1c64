mod common;

use nalgebra::DMatrix;
use robust_intervention::diagnostics::{local_uncertainty_cost_matrix, objective_value};
use robust_intervention::linalg::quad_form;
use robust_intervention::model::two_agent_family;
use robust_intervention::nature::inner_max_value;
use robust_intervention::solver::{
    classical_solution, enumerate_fixed_points, solve_robust, verify_saddle, SearchStrategy, SolverError,
    SolverOptions,
};

fn exhaustive() -> SolverOptions {
    SolverOptions {
        search: SearchStrategy::Exhaustive,
        ..SolverOptions::default()
    }
}

#[test]
fn iteration_and_exhaustive_agree() {
    let mut r = common::rng(21);
    for n in 1..=5 {
        for _ in 0..20 {
            let (spec, a) = common::random_solved(&mut r, n);
            let b = solve_robust(&spec, &exhaustive()).unwrap();
            assert_eq!(a.worst_case.sign_pattern, b.worst_case.sign_pattern);
            assert!((&a.x_star - &b.x_star).amax() <= 1e-12 * (1.0 + a.x_star.amax()));
        }
    }
}

#[test]
fn dense_cost_instances_certify() {
    let mut r = common::rng(22);
    let mut solved = 0;
    while solved < 30 {
        let spec = common::random_spec_dense_cost(&mut r, 2 + solved % 3);
        let Ok(sol) = solve_robust(&spec, &SolverOptions::default()) else {
            continue;
        };
        let cert = verify_saddle(&spec, &sol).unwrap();
        assert!(cert.pass, "{cert:?}");
        solved += 1;
    }
}

#[test]
fn single_strict_fixed_point_per_instance() {
    let mut r = common::rng(23);
    for n in 2..=5 {
        for _ in 0..15 {
            let (spec, _) = common::random_solved(&mut r, n);
            let strict: Vec<_> = enumerate_fixed_points(&spec, &SolverOptions::default())
                .unwrap()
                .into_iter()
                .filter(|f| f.strict)
                .collect();
            assert_eq!(strict.len(), 1);
        }
    }
}

#[test]
fn objective_grows_with_uncertainty() {
    let mut r = common::rng(24);
    for _ in 0..40 {
        let (spec, _) = common::random_solved(&mut r, 3);
        let mut last = f64::NEG_INFINITY;
        for t in [0.0, 0.5, 1.0, 2.0] {
            let scaled = spec.with_std_scaled(t);
            let value = match solve_robust(&scaled, &SolverOptions::default()) {
                Ok(sol) => sol.objective,
                Err(SolverError::PropertyBViolation { candidate, .. }) => candidate.objective,
                Err(SolverError::NoFixedPoint { .. }) => continue,
                Err(e) => panic!("{e}"),
            };
            assert!(value >= last - 1e-12 * (1.0 + value.abs()), "t = {t}: {value} < {last}");
            last = value;
        }
    }
}

#[test]
fn vanishing_uncertainty_recovers_classical_intervention() {
    let mut r = common::rng(25);
    for _ in 0..20 {
        let (spec, _) = common::random_solved(&mut r, 3);
        let classical = classical_solution(&spec).unwrap();
        let err = |t: f64| {
            let sol = solve_robust(&spec.with_std_scaled(t), &SolverOptions::default()).unwrap();
            (&sol.x_star - &classical).amax()
        };
        let (e1, e2) = (err(1e-2), err(1e-3));
        // quadratic convergence: a tenfold smaller std shrinks the error about a hundredfold
        assert!(e2 <= 2e-2 * e1 + 1e-14, "{e1} {e2}");
        assert!(e1 <= 1e-2 * (1.0 + classical.amax()));
    }
}

#[test]
fn local_costs_are_positive_under_property_b() {
    let mut r = common::rng(26);
    for n in 1..=5 {
        for _ in 0..10 {
            let (spec, sol) = common::random_solved(&mut r, n);
            let costs = local_uncertainty_cost_matrix(&sol, &spec).unwrap();
            assert!(costs.iter().all(|&c| c > 0.0));
        }
    }
}

#[test]
fn local_cost_matches_finite_differences() {
    let mut r = common::rng(27);
    let h = 1e-5;
    for n in 1..=4 {
        let (spec, sol) = common::random_solved(&mut r, n);
        let costs = local_uncertainty_cost_matrix(&sol, &spec).unwrap();
        for i in 0..n {
            for j in 0..n {
                let mut up = spec.clone();
                up.std[(i, j)] += h;
                let mut down = spec.clone();
                down.std[(i, j)] -= h;
                let fd = (inner_max_value(&sol.x_star, &up) - inner_max_value(&sol.x_star, &down)) / (2.0 * h);
                assert!((fd - costs[(i, j)]).abs() <= 1e-5 * costs[(i, j)].abs(), "{fd} vs {}", costs[(i, j)]);
            }
        }
    }
}

#[test]
fn global_envelope_along_feasible_directions() {
    let mut r = common::rng(28);
    for n in 2..=5 {
        for _ in 0..10 {
            let (spec, sol) = common::random_solved(&mut r, n);
            let b_star = &sol.worst_case.aggregate;
            let other = common::sum_blocks(&common::random_feasible(&mut r, &spec), n);
            let db: DMatrix<f64> = &other - b_star;
            let value = |t: f64| {
                let b = b_star + &db * t;
                objective_value(&spec, &common::best_response(&spec, &b), &b)
            };
            let f0 = value(0.0);
            let slope = 0.5 * quad_form(&db, &sol.x_star);
            for t in [1e-3, 1e-4] {
                let fd = (value(t) - f0) / t;
                let roundoff = 8.0 * f64::EPSILON * (1.0 + f0.abs()) / t;
                assert!(
                    (fd - slope).abs() <= 10.0 * t * db.norm_squared() + roundoff,
                    "t = {t}: {fd} vs {slope}"
                );
            }
        }
    }
}

#[test]
fn no_fixed_point_instance_is_reported() {
    // Property B fails for every orthant here
    match solve_robust(&two_agent_family(3.0, 1.7, 0.5), &SolverOptions::default()) {
        Err(SolverError::NoFixedPoint { orthants_tried }) => assert!(orthants_tried >= 4),
        other => panic!("unexpected {other:?}"),
    }
}
