mod common;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use robust_intervention::expansion::{
    expansion_worst_case, expansion_worst_case_at, slice_ellipsoid_max, solve_expansion, ExpansionOptions,
    ExpansionSpec,
};
use robust_intervention::linalg::min_eigenvalue;
use robust_intervention::model::{Cost, ProblemSpec};

fn random_pd(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = common::uniform_matrix(r, n, -1.0, 1.0);
    &a * a.transpose() + DMatrix::identity(n, n) * 0.1
}

/// `2·atan2(‖â − b̂‖, ‖â + b̂‖)`, accurate for tiny angles unlike `acos`.
fn angle(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let (ua, ub) = (a / a.norm(), b / b.norm());
    2.0 * (&ua - &ub).norm().atan2((&ua + &ub).norm())
}

#[test]
fn unpinned_maximizer_is_on_boundary_and_collinear() {
    let mut r = common::rng(31);
    for trial in 0..200 {
        let n = 1 + trial % 5;
        let b_mat = random_pd(&mut r, n);
        let b = r.random_range(0.1..3.0);
        let c = common::uniform_vector(&mut r, n, -1.0, 1.0);
        let sm = slice_ellipsoid_max(&b_mat, b, &[], &c).unwrap();
        let chol = b_mat.clone().cholesky().unwrap();
        let q = sm.beta.dot(&chol.solve(&sm.beta));
        assert!((q - b).abs() <= 1e-10 * b, "trial {trial}: {q} vs {b}");
        assert!(angle(&sm.beta, &(&b_mat * &c)) <= 1e-8, "trial {trial}");
    }
}

#[test]
fn disk_grid_never_beats_the_analytic_maximizer() {
    let mut r = common::rng(32);
    let k = 401;
    for _ in 0..10 {
        let b_mat = random_pd(&mut r, 2);
        let b = r.random_range(0.2..2.0);
        let c = common::uniform_vector(&mut r, 2, -1.0, 1.0);
        let best = c.dot(&slice_ellipsoid_max(&b_mat, b, &[], &c).unwrap().beta);
        let inv = b_mat.clone().try_inverse().unwrap();
        let half = [(b * b_mat[(0, 0)]).sqrt(), (b * b_mat[(1, 1)]).sqrt()];
        let step = [2.0 * half[0] / (k - 1) as f64, 2.0 * half[1] / (k - 1) as f64];
        let mut grid_best = f64::NEG_INFINITY;
        for i in 0..k {
            for j in 0..k {
                let beta = DVector::from_vec(vec![-half[0] + step[0] * i as f64, -half[1] + step[1] * j as f64]);
                if beta.dot(&(&inv * &beta)) <= b {
                    grid_best = grid_best.max(c.dot(&beta));
                }
            }
        }
        let resolution = c[0].abs() * step[0] + c[1].abs() * step[1];
        assert!(grid_best <= best + 1e-12 * (1.0 + best.abs()));
        assert!(grid_best >= best - resolution, "{grid_best} vs {best}");
    }
}

#[test]
fn pinned_slice_matches_line_search() {
    let mut r = common::rng(33);
    let k = 20_001;
    for _ in 0..20 {
        let b_mat = random_pd(&mut r, 2);
        let b = 1.0;
        let bound = (b * b_mat[(1, 1)]).sqrt();
        let pin = r.random_range(-0.9..0.9) * bound;
        let c = DVector::from_vec(vec![r.random_range(0.2..1.0), 0.0]);
        let sm = slice_ellipsoid_max(&b_mat, b, &[(1, pin)], &c).unwrap();
        assert_eq!(sm.beta[1], pin);
        let inv = b_mat.clone().try_inverse().unwrap();
        let half = (b * b_mat[(0, 0)]).sqrt();
        let mut line_best = f64::NEG_INFINITY;
        for i in 0..k {
            let t = -half + 2.0 * half * i as f64 / (k - 1) as f64;
            let beta = DVector::from_vec(vec![t, pin]);
            if beta.dot(&(&inv * &beta)) <= b {
                line_best = line_best.max(t);
            }
        }
        assert!(line_best <= sm.beta[0] + 1e-12);
        assert!(line_best >= sm.beta[0] - 2.0 * half / (k - 1) as f64);
    }
}

#[test]
fn completed_blocks_are_psd() {
    let mut r = common::rng(34);
    for trial in 0..50 {
        let n = 1 + trial % 4;
        let blocks = (0..n).map(|_| random_pd(&mut r, n)).collect();
        let mut e = ExpansionSpec::with_defaults(blocks);
        for i in 0..n {
            e.new_variances[i] = r.random_range(0.1..2.0);
        }
        let mut x = common::uniform_vector(&mut r, n + 1, 0.2, 1.0);
        for j in 0..=n {
            if r.random_bool(0.5) {
                x[j] = -x[j];
            }
        }
        e.x_bar = Some(x);
        let wc = expansion_worst_case(&e).unwrap();
        for b in &wc.blocks {
            assert!(min_eigenvalue(b) >= -1e-10 * b.trace());
        }
    }
}

fn running_base(c: f64) -> ProblemSpec {
    ProblemSpec::new(
        DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.1, 0.2, 1.0, 0.1, 0.1, 0.1, 1.0]),
        DMatrix::zeros(3, 3),
        Cost::scaled_identity(c),
        DVector::from_element(3, 1.0),
        DVector::zeros(3),
    )
}

fn running_example() -> ExpansionSpec {
    let rho = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
    ExpansionSpec::with_defaults(vec![DMatrix::identity(2, 2), rho])
}

#[test]
fn running_example_converges_with_small_gap() {
    let sol = solve_expansion(&running_example(), &running_base(5.0), &ExpansionOptions::default()).unwrap();
    assert!(sol.gap <= 1e-8, "gap {}", sol.gap);
    let again = expansion_worst_case_at(&running_example(), &sol.x).unwrap();
    assert!((&again.aggregate - &sol.worst_case.aggregate).amax() <= 1e-12);
}

#[test]
fn vanishing_new_links_reduce_to_a_known_covariance() {
    let s = 1e-10;
    let mut e = running_example();
    e.new_variances = DVector::from_element(3, s * s);
    e.new_agent_std = DVector::from_element(3, s);
    let base = running_base(2.0);
    let sol = solve_expansion(&e, &base, &ExpansionOptions::default()).unwrap();
    let mut known = DMatrix::zeros(3, 3);
    for b in &e.base_blocks {
        let mut top = known.view_mut((0, 0), (2, 2));
        top += b;
    }
    let direct = common::best_response(&base, &known);
    assert!((&sol.x - &direct).amax() <= 1e-9, "{} vs {}", sol.x, direct);
}

#[test]
fn exchangeable_agents_get_equal_allocations() {
    let rho = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
    let e = ExpansionSpec::with_defaults(vec![rho.clone(), rho]);
    let base = ProblemSpec::new(
        DMatrix::from_row_slice(3, 3, &[1.0, 0.4, 0.2, 0.4, 1.0, 0.2, 0.3, 0.3, 1.0]),
        DMatrix::zeros(3, 3),
        Cost::scaled_identity(3.0),
        DVector::from_element(3, 1.0),
        DVector::zeros(3),
    );
    let sol = solve_expansion(&e, &base, &ExpansionOptions::default()).unwrap();
    assert!((sol.x[0] - sol.x[1]).abs() <= 1e-10, "{}", sol.x);
}

#[test]
fn correlation_sweep_is_recorded_not_ranked() {
    let c = DVector::from_element(2, 1.0);
    for rho in [0.0, 0.25, 0.5, 0.75, 0.9] {
        let b_mat = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        let sm = slice_ellipsoid_max(&b_mat, 1.0, &[], &c).unwrap();
        eprintln!("rho = {rho}: beta = ({:.6}, {:.6}), value {:.6}", sm.beta[0], sm.beta[1], c.dot(&sm.beta));
        assert!(sm.boundary_residual.abs() <= 1e-12);
        assert!(angle(&sm.beta, &(&b_mat * &c)) <= 1e-8);
    }
}
