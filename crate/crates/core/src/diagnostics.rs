//! Objective evaluation and comparative statics at the robust solution.
//!
//! Conventions: the objective carries the factor ½ throughout. The local
//! uncertainty cost is the derivative of the *un-halved* inner value
//! `Σᵢ(Σⱼ v_ij|x_j|)²`, i.e. twice the derivative of the ½-normalized objective.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::model::{self, AggregatedModel, ProblemSpec};
use crate::solver::{near_zero_indices, RobustSolution, EPS_SIGN};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosticsError {
    #[error("property B violated at entries {indices:?}; the derivative is not defined")]
    PropertyBViolation { indices: Vec<usize> },
    #[error("link ({i}, {j}) out of range for n = {n}")]
    IndexOutOfRange { i: usize, j: usize, n: usize },
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("closed form outside its first-quadrant regime: x = ({x1}, {x2})")]
    Regime { x1: f64, x2: f64 },
}

/// `f(x, B) = ½(⟨x,Mx⟩ + ⟨x,Bx⟩ + ⟨x,Cx⟩ − 2⟨ψ⁰+ψ,x⟩ + ‖z‖² + ⟨x⁰,Cx⁰⟩)`.
pub fn objective_value(spec: &ProblemSpec, x: &DVector<f64>, b: &DMatrix<f64>) -> f64 {
    let model = model::aggregate_unchecked(spec);
    objective_with_model(&model, spec, x, b)
}

pub fn objective_with_model(
    model: &AggregatedModel,
    spec: &ProblemSpec,
    x: &DVector<f64>,
    b: &DMatrix<f64>,
) -> f64 {
    let quad = linalg::quad_form(&model.m, x) + linalg::quad_form(&model.cost, x);
    let linear = model.rhs().dot(x);
    let constant = spec.target.dot(&spec.target) + linalg::quad_form(&model.cost, &spec.reference);
    0.5 * (quad - 2.0 * linear + constant) + 0.5 * linalg::quad_form(b, x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyCostReport {
    /// `x*⊗x*`, the gradient of the optimal value in `B` (½ convention
    /// absorbed: the directional derivative along `ΔB` is `½⟨x*, ΔB x*⟩`).
    pub global_cost: Vec<Vec<f64>>,
    /// `(i, j) ↦ 2Σ_k v_ik|x_j*||x_k*|` (un-halved convention).
    pub local_cost: Vec<Vec<f64>>,
    pub convention: String,
}

fn require_property_b(sol: &RobustSolution) -> Result<(), DiagnosticsError> {
    let indices = near_zero_indices(&sol.x_star, EPS_SIGN);
    if indices.is_empty() {
        Ok(())
    } else {
        Err(DiagnosticsError::PropertyBViolation { indices })
    }
}

pub fn global_uncertainty_cost(sol: &RobustSolution) -> Result<DMatrix<f64>, DiagnosticsError> {
    require_property_b(sol)?;
    Ok(linalg::outer(&sol.x_star, &sol.x_star))
}

fn local_cost_unchecked(x: &DVector<f64>, std: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for k in 0..x.len() {
        s += std[(i, k)] * x[k].abs();
    }
    2.0 * x[j].abs() * s
}

/// Sensitivity of the inner value to the standard deviation `v_ij`.
pub fn local_uncertainty_cost(
    sol: &RobustSolution,
    spec: &ProblemSpec,
    i: usize,
    j: usize,
) -> Result<f64, DiagnosticsError> {
    let n = spec.n();
    if i >= n || j >= n {
        return Err(DiagnosticsError::IndexOutOfRange { i, j, n });
    }
    require_property_b(sol)?;
    Ok(local_cost_unchecked(&sol.x_star, &spec.std, i, j))
}

pub fn local_uncertainty_cost_matrix(
    sol: &RobustSolution,
    spec: &ProblemSpec,
) -> Result<DMatrix<f64>, DiagnosticsError> {
    require_property_b(sol)?;
    let n = spec.n();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        local_cost_unchecked(&sol.x_star, &spec.std, i, j)
    }))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub fn uncertainty_costs(
    sol: &RobustSolution,
    spec: &ProblemSpec,
) -> Result<UncertaintyCostReport, DiagnosticsError> {
    Ok(UncertaintyCostReport {
        global_cost: rows(&global_uncertainty_cost(sol)?),
        local_cost: rows(&local_uncertainty_cost_matrix(sol, spec)?),
        convention: "global: gradient of the 1/2-normalized value; local: derivative of the un-halved inner value".into(),
    })
}

/// Closed-form robust intervention for the two-agent family in the
/// first-quadrant regime.
pub fn two_agent_solution(m: f64, v: f64, c: f64) -> Result<DVector<f64>, DiagnosticsError> {
    if !(m > 1.0 && v > 0.0 && c > 0.0) {
        return Err(DiagnosticsError::InvalidParameters(format!(
            "need m > 1, v > 0, c > 0 (got m = {m}, v = {v}, c = {c})"
        )));
    }
    let a11 = m * m + v * v + c / 2.0;
    let a12 = m + v;
    let a22 = 2.0 + c / 2.0;
    let det = a11 * a22 - a12 * a12;
    let x1 = ((1.0 + c / 2.0) * m - v) / det;
    let x2 = (v * v + c / 2.0 - m * v) / det;
    if x1 <= 0.0 || x2 <= 0.0 {
        return Err(DiagnosticsError::Regime { x1, x2 });
    }
    Ok(DVector::from_vec(vec![x1, x2]))
}

/// Standard deviation `v̄(m)` at which the two allocations coincide.
pub fn two_agent_threshold(m: f64, c: f64) -> f64 {
    0.5 * ((m - 1.0) + (2.0 * c * (m - 1.0) + (m + 1.0) * (m + 1.0)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{two_agent_family, Cost};
    use crate::solver::{solve_robust, SolverOptions};

    #[test]
    fn objective_at_zero_is_half_target_norm() {
        let spec = two_agent_family(2.0, 0.5, 2.0);
        assert_eq!(
            objective_value(&spec, &DVector::zeros(2), &DMatrix::zeros(2, 2)),
            1.0
        );
    }

    #[test]
    fn scalar_objective() {
        let spec = ProblemSpec::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            Cost::scaled_identity(1.0),
            DVector::from_element(1, 1.0),
            DVector::zeros(1),
        );
        let f = objective_value(
            &spec,
            &DVector::from_element(1, 1.0 / 3.0),
            &DMatrix::from_element(1, 1, 1.0),
        );
        assert!((f - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn global_cost_is_outer_product() {
        let mut sol =
            solve_robust(&two_agent_family(2.0, 0.5, 2.0), &SolverOptions::default()).unwrap();
        sol.x_star = DVector::from_vec(vec![1.0, 2.0]);
        let g = global_uncertainty_cost(&sol).unwrap();
        assert_eq!(g, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]));
        assert_eq!(linalg::singular_values(&g)[1], 0.0);
    }

    #[test]
    fn local_cost_formula() {
        let spec = ProblemSpec::new(
            DMatrix::identity(2, 2),
            DMatrix::from_element(2, 2, 1.0),
            Cost::scaled_identity(1.0),
            DVector::from_vec(vec![1.0, -1.0]),
            DVector::zeros(2),
        );
        let mut sol = solve_robust(&spec, &SolverOptions::default()).unwrap();
        sol.x_star = DVector::from_vec(vec![1.0, -1.0]);
        assert_eq!(local_uncertainty_cost(&sol, &spec, 0, 0).unwrap(), 4.0);
        assert!(matches!(
            local_uncertainty_cost(&sol, &spec, 2, 0),
            Err(DiagnosticsError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn two_agent_closed_form_values() {
        let x = two_agent_solution(2.0, 0.5, 2.0).unwrap();
        assert!((x[0] - 3.5 / 9.5).abs() < 1e-15 && (x[1] - 0.25 / 9.5).abs() < 1e-15);
        assert!(matches!(
            two_agent_solution(2.0, 1.0, 2.0),
            Err(DiagnosticsError::Regime { .. })
        ));
    }

    #[test]
    fn threshold_values() {
        assert!((two_agent_threshold(2.0, 2.0) - 0.5 * (1.0 + 13f64.sqrt())).abs() < 1e-15);
        assert_eq!(two_agent_threshold(1.0, 7.0), 1.0);
    }
}
