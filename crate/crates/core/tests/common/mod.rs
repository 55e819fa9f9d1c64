#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robust_intervention::model::{Cost, ProblemSpec};
use robust_intervention::solver::{self, RobustSolution, SolverOptions};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |_, _| rng.random_range(lo..hi))
}

pub fn uniform_vector(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(lo..hi))
}

/// Mean in [-1, 1], std in [0.1, 0.8], `C = cI` with c in [0.5, 2].
pub fn random_spec(rng: &mut ChaCha8Rng, n: usize) -> ProblemSpec {
    let mean = uniform_matrix(rng, n, -1.0, 1.0);
    let std = uniform_matrix(rng, n, 0.1, 0.8);
    let c = rng.random_range(0.5..2.0);
    let target = uniform_vector(rng, n, -1.0, 1.0);
    let reference = uniform_vector(rng, n, -0.5, 0.5);
    ProblemSpec::new(mean, std, Cost::scaled_identity(c), target, reference)
}

/// Like [`random_spec`] with a random dense PSD cost.
pub fn random_spec_dense_cost(rng: &mut ChaCha8Rng, n: usize) -> ProblemSpec {
    let mut spec = random_spec(rng, n);
    let a = uniform_matrix(rng, n, -1.0, 1.0);
    spec.cost = Cost::dense(&a * a.transpose() + DMatrix::identity(n, n) * 0.2);
    spec
}

/// Draws instances until one solves with a strict-sign fixed point.
pub fn random_solved(rng: &mut ChaCha8Rng, n: usize) -> (ProblemSpec, RobustSolution) {
    loop {
        let spec = random_spec(rng, n);
        if let Ok(sol) = solver::solve_robust(&spec, &SolverOptions::default()) {
            if sol.property_b {
                return (spec, sol);
            }
        }
    }
}

/// Feasible covariance for agent `i`: `D R D` with `R` a random correlation matrix.
pub fn random_feasible_block(rng: &mut ChaCha8Rng, v: &[f64]) -> DMatrix<f64> {
    let n = v.len();
    let a = uniform_matrix(rng, n, -1.0, 1.0);
    let g = &a * a.transpose() + DMatrix::identity(n, n) * 1e-3;
    DMatrix::from_fn(n, n, |j, k| v[j] * v[k] * g[(j, k)] / (g[(j, j)] * g[(k, k)]).sqrt())
}

pub fn random_feasible(rng: &mut ChaCha8Rng, spec: &ProblemSpec) -> Vec<DMatrix<f64>> {
    (0..spec.n())
        .map(|i| {
            let v: Vec<f64> = spec.std.row(i).iter().copied().collect();
            random_feasible_block(rng, &v)
        })
        .collect()
}

pub fn sum_blocks(blocks: &[DMatrix<f64>], n: usize) -> DMatrix<f64> {
    blocks.iter().fold(DMatrix::zeros(n, n), |acc, b| acc + b)
}

/// `min_x f(x, B)` by a direct solve of `(M + B + C)x = ψ⁰ + ψ`.
pub fn best_response(spec: &ProblemSpec, b: &DMatrix<f64>) -> DVector<f64> {
    let model = robust_intervention::model::aggregate(spec).unwrap();
    let k = &model.m + b + &model.cost;
    k.lu().solve(&model.rhs()).unwrap()
}
