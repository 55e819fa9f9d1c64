//! Orthant fixed-point search for the robust intervention.
//!
//! For a sign pattern `s` the worst case `B*(s)` is known in closed form, so
//! the decision maker's best response solves `(M + B*(s) + C) x = ψ⁰ + ψ`.
//! The saddle point is the pattern whose solution lands back in its own
//! orthant.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::objective_with_model;
use crate::linalg::{self, LinalgError, LinearSolve, SolveMethod};
use crate::model::{self, AggregatedModel, ModelError, ProblemSpec, SignPattern};
use crate::nature::{self, WorstCase};

/// Entries with `|x_i| ≤ EPS_SIGN·‖x‖∞` count as zero.
pub const EPS_SIGN: f64 = 1e-9;
pub const N_MAX_EXHAUSTIVE: usize = 16;
pub const MAX_ORTHANT_ITERS: usize = 64;
pub const STATIONARITY_TOL: f64 = 1e-10;
pub const DUALITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchStrategy {
    /// Sign iteration from the no-uncertainty solution, exhaustive fallback.
    Iterate,
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub search: SearchStrategy,
    pub max_orthant_iters: usize,
    pub eps_sign: f64,
    pub n_max_exhaustive: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            search: SearchStrategy::Iterate,
            max_orthant_iters: MAX_ORTHANT_ITERS,
            eps_sign: EPS_SIGN,
            n_max_exhaustive: N_MAX_EXHAUSTIVE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SignIteration,
    Exhaustive,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::SignIteration => "sign-iteration",
            Method::Exhaustive => "exhaustive",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustSolution {
    pub x_star: DVector<f64>,
    pub worst_case: WorstCase,
    pub objective: f64,
    /// `‖(M+B*+C)x* − ψ⁰ − ψ‖ / (1 + ‖ψ⁰+ψ‖)`
    pub stationarity_residual: f64,
    /// `|max_B f(x*,B) − min_x f(x,B*)| / (1 + |f|)`
    pub duality_gap: f64,
    pub orthants_tried: usize,
    pub method: Method,
    pub property_b: bool,
    pub linear_solve: SolveMethod,
    pub smallest_pivot: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("linear solve failed for orthant {signs}: {source}")]
    Linalg {
        signs: SignPattern,
        #[source]
        source: LinalgError,
    },
    #[error("property B violated: entries {indices:?} of the fixed point are numerically zero")]
    PropertyBViolation {
        /// 0-based indices of the near-zero entries.
        indices: Vec<usize>,
        /// The boundary fixed point that was found.
        candidate: Box<RobustSolution>,
    },
    #[error("no strict-sign fixed point after trying {orthants_tried} orthants")]
    NoFixedPoint { orthants_tried: usize },
    #[error("exhaustive search over n = {n} agents exceeds the limit of {max}")]
    TooLarge { n: usize, max: usize },
}

/// Solves the stationarity system for the worst case attached to `signs`.
pub fn solve_for_orthant(
    model: &AggregatedModel,
    spec: &ProblemSpec,
    signs: &SignPattern,
) -> Result<LinearSolve, SolverError> {
    let wc = nature::worst_case(signs, spec);
    solve_with_worst_case(model, &wc)
}

fn system_matrix(model: &AggregatedModel, b: &DMatrix<f64>) -> DMatrix<f64> {
    &model.m + b + &model.cost
}

fn solve_with_worst_case(
    model: &AggregatedModel,
    wc: &WorstCase,
) -> Result<LinearSolve, SolverError> {
    linalg::solve_spd(&system_matrix(model, &wc.aggregate), &model.rhs()).map_err(|source| {
        SolverError::Linalg {
            signs: wc.sign_pattern.clone(),
            source,
        }
    })
}

/// The no-uncertainty intervention `(M + C)⁻¹(ψ⁰ + ψ)`.
pub fn classical_solution(spec: &ProblemSpec) -> Result<DVector<f64>, SolverError> {
    let model = model::aggregate(spec)?;
    let s = linalg::solve_spd(
        &system_matrix(&model, &DMatrix::zeros(spec.n(), spec.n())),
        &model.rhs(),
    )
    .map_err(|source| SolverError::Linalg {
        signs: SignPattern::all_positive(spec.n()),
        source,
    })?;
    Ok(s.x)
}

/// Indices with `|x_i| ≤ eps·‖x‖∞` (all of them when x = 0).
pub fn near_zero_indices(x: &DVector<f64>, eps: f64) -> Vec<usize> {
    let scale = linalg::norm_inf(x);
    (0..x.len())
        .filter(|&i| x[i].abs() <= eps * scale)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Consistency {
    /// Every sign matches with margin.
    Strict,
    /// Mismatches only on numerically zero entries.
    Weak,
    No,
}

fn consistency(x: &DVector<f64>, signs: &SignPattern, eps: f64) -> Consistency {
    let scale = linalg::norm_inf(x);
    let mut weak = false;
    for i in 0..x.len() {
        if x[i].abs() <= eps * scale {
            weak = true;
        } else if (x[i] > 0.0) != (signs.get(i) > 0.0) {
            return Consistency::No;
        }
    }
    if weak {
        Consistency::Weak
    } else {
        Consistency::Strict
    }
}

/// One orthant evaluated during the search.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    pub signs: SignPattern,
    pub x: DVector<f64>,
    /// All signs match with margin (false: only up to near-zero entries).
    pub strict: bool,
}

/// Evaluates all 2ⁿ orthants in lexicographic order (−1 before +1) and
/// returns the consistent ones, strict or not.
pub fn enumerate_fixed_points(
    spec: &ProblemSpec,
    options: &SolverOptions,
) -> Result<Vec<FixedPoint>, SolverError> {
    let n = spec.n();
    if n > options.n_max_exhaustive {
        return Err(SolverError::TooLarge {
            n,
            max: options.n_max_exhaustive,
        });
    }
    let model = model::aggregate(spec)?;
    Ok(enumerate_with_model(&model, spec, options.eps_sign).0)
}

fn enumerate_with_model(
    model: &AggregatedModel,
    spec: &ProblemSpec,
    eps: f64,
) -> (Vec<FixedPoint>, usize) {
    let n = spec.n();
    let mut found = Vec::new();
    let mut tried = 0;
    for index in 0..(1u64 << n) {
        let signs = SignPattern::from_index(n, index);
        tried += 1;
        let Ok(sol) = solve_for_orthant(model, spec, &signs) else {
            continue;
        };
        match consistency(&sol.x, &signs, eps) {
            Consistency::Strict => found.push(FixedPoint {
                signs,
                x: sol.x,
                strict: true,
            }),
            Consistency::Weak => found.push(FixedPoint {
                signs,
                x: sol.x,
                strict: false,
            }),
            Consistency::No => {}
        }
    }
    (found, tried)
}

/// Finds the robust intervention and Nature's worst case.
pub fn solve_robust(
    spec: &ProblemSpec,
    options: &SolverOptions,
) -> Result<RobustSolution, SolverError> {
    let model = model::aggregate(spec)?;
    let n = spec.n();
    if options.search == SearchStrategy::Exhaustive {
        return solve_exhaustive(&model, spec, options, 0, Vec::new());
    }

    let mut warnings = Vec::new();
    let start = match linalg::solve_spd(&system_matrix(&model, &DMatrix::zeros(n, n)), &model.rhs())
    {
        Ok(s) => SignPattern::of(&s.x),
        Err(e) => {
            warnings.push(format!(
                "warm start unavailable ({e}); starting from the positive orthant"
            ));
            SignPattern::all_positive(n)
        }
    };

    let mut signs = start;
    let mut visited = HashSet::new();
    let mut tried = 0;
    while tried < options.max_orthant_iters {
        let wc = nature::worst_case(&signs, spec);
        let sol = solve_with_worst_case(&model, &wc)?;
        tried += 1;
        match consistency(&sol.x, &signs, options.eps_sign) {
            Consistency::Strict => {
                return Ok(finish(
                    &model,
                    spec,
                    sol,
                    wc,
                    tried,
                    Method::SignIteration,
                    options,
                    warnings,
                ));
            }
            Consistency::Weak => {
                let indices = near_zero_indices(&sol.x, options.eps_sign);
                let candidate = finish(
                    &model,
                    spec,
                    sol,
                    wc,
                    tried,
                    Method::SignIteration,
                    options,
                    warnings,
                );
                return Err(SolverError::PropertyBViolation {
                    indices,
                    candidate: Box::new(candidate),
                });
            }
            Consistency::No => {}
        }
        visited.insert(signs.clone());
        let next = SignPattern::of(&sol.x);
        if visited.contains(&next) {
            log::debug!("sign iteration cycled after {tried} orthants");
            warnings.push(format!("sign iteration cycled after {tried} orthants"));
            break;
        }
        signs = next;
    }
    if n > options.n_max_exhaustive {
        return Err(SolverError::NoFixedPoint {
            orthants_tried: tried,
        });
    }
    solve_exhaustive(&model, spec, options, tried, warnings)
}

fn solve_exhaustive(
    model: &AggregatedModel,
    spec: &ProblemSpec,
    options: &SolverOptions,
    already_tried: usize,
    mut warnings: Vec<String>,
) -> Result<RobustSolution, SolverError> {
    let n = spec.n();
    if n > options.n_max_exhaustive {
        return Err(SolverError::TooLarge {
            n,
            max: options.n_max_exhaustive,
        });
    }
    let (found, tried) = enumerate_with_model(model, spec, options.eps_sign);
    let tried = tried + already_tried;
    let strict: Vec<&FixedPoint> = found.iter().filter(|f| f.strict).collect();
    let build = |fp: &FixedPoint, warnings: Vec<String>| -> Result<RobustSolution, SolverError> {
        let wc = nature::worst_case(&fp.signs, spec);
        let sol = solve_with_worst_case(model, &wc)?;
        Ok(finish(
            model,
            spec,
            sol,
            wc,
            tried,
            Method::Exhaustive,
            options,
            warnings,
        ))
    };
    match strict.len() {
        0 => match found.first() {
            Some(weak) => {
                let candidate = build(weak, warnings)?;
                Err(SolverError::PropertyBViolation {
                    indices: near_zero_indices(&weak.x, options.eps_sign),
                    candidate: Box::new(candidate),
                })
            }
            None => Err(SolverError::NoFixedPoint {
                orthants_tried: tried,
            }),
        },
        1 => build(strict[0], warnings),
        count => {
            // not expected in exact arithmetic: keep the best certified one, deterministically
            let mut best: Option<RobustSolution> = None;
            for fp in &strict {
                let s = build(fp, Vec::new())?;
                if best.as_ref().is_none_or(|b| s.duality_gap < b.duality_gap) {
                    best = Some(s);
                }
            }
            let mut best = best.expect("at least two candidates");
            let msg = format!(
                "{count} strict-sign fixed points found; kept {} with duality gap {:e}",
                best.worst_case.sign_pattern, best.duality_gap
            );
            log::warn!("{msg}");
            warnings.push(msg);
            best.warnings = warnings;
            Ok(best)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    model: &AggregatedModel,
    spec: &ProblemSpec,
    sol: LinearSolve,
    wc: WorstCase,
    orthants_tried: usize,
    method: Method,
    options: &SolverOptions,
    mut warnings: Vec<String>,
) -> RobustSolution {
    let x = sol.x;
    if sol.method == SolveMethod::PivotedLu {
        warnings.push(format!(
            "system not positive definite (smallest Cholesky pivot {:e}); solved by pivoted LU",
            sol.smallest_pivot
        ));
    }
    if !model.property_a.full_rank {
        warnings.push(format!(
            "mean influence M is rank deficient (smallest singular value {:e})",
            model.property_a.smallest_singular_value
        ));
    }
    let objective = objective_with_model(model, spec, &x, &wc.aggregate);
    let stationarity_residual = stationarity(model, &wc.aggregate, &x);
    let duality_gap = duality_gap_at(model, spec, &x, &wc.aggregate, objective);
    let property_b = near_zero_indices(&x, options.eps_sign).is_empty();
    RobustSolution {
        x_star: x,
        worst_case: wc,
        objective,
        stationarity_residual,
        duality_gap,
        orthants_tried,
        method,
        property_b,
        linear_solve: sol.method,
        smallest_pivot: sol.smallest_pivot,
        warnings,
    }
}

fn stationarity(model: &AggregatedModel, b: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let rhs = model.rhs();
    let r = system_matrix(model, b) * x - &rhs;
    r.norm() / (1.0 + rhs.norm())
}

/// Upper side `max_B f(x, B)` in closed form.
fn upper_value(model: &AggregatedModel, spec: &ProblemSpec, x: &DVector<f64>) -> f64 {
    let n = x.len();
    objective_with_model(model, spec, x, &DMatrix::zeros(n, n))
        + 0.5 * nature::inner_max_value(x, spec)
}

/// Lower side `min_x f(x, B)` by one linear solve.
fn lower_value(model: &AggregatedModel, spec: &ProblemSpec, b: &DMatrix<f64>) -> Option<f64> {
    let s = linalg::solve_spd(&system_matrix(model, b), &model.rhs()).ok()?;
    Some(objective_with_model(model, spec, &s.x, b))
}

fn duality_gap_at(
    model: &AggregatedModel,
    spec: &ProblemSpec,
    x: &DVector<f64>,
    b: &DMatrix<f64>,
    objective: f64,
) -> f64 {
    match lower_value(model, spec, b) {
        Some(lo) => (upper_value(model, spec, x) - lo).abs() / (1.0 + objective.abs()),
        None => f64::INFINITY,
    }
}

/// Saddle-point certificate recomputed from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// `max_B f(x*, B)`
    pub max_over_b: f64,
    /// `min_x f(x, B*)`
    pub min_over_x: f64,
    /// `(max_over_b − min_over_x) / (1 + |f(x*,B*)|)`, ≥ 0 up to roundoff.
    pub gap: f64,
    pub stationarity_residual: f64,
    /// `sign(x*)` equals the pattern that generated `B*`.
    pub sign_consistent: bool,
    pub pass: bool,
}

pub fn verify_saddle(spec: &ProblemSpec, sol: &RobustSolution) -> Result<Certificate, SolverError> {
    let model = model::aggregate(spec)?;
    let x = &sol.x_star;
    let b = &sol.worst_case.aggregate;
    let value = objective_with_model(&model, spec, x, b);
    let max_over_b = upper_value(&model, spec, x);
    let min_over_x = lower_value(&model, spec, b).unwrap_or(f64::NAN);
    let gap = (max_over_b - min_over_x) / (1.0 + value.abs());
    let stationarity_residual = stationarity(&model, b, x);
    let sign_consistent =
        consistency(x, &sol.worst_case.sign_pattern, EPS_SIGN) == Consistency::Strict;
    let pass =
        gap.abs() <= DUALITY_TOL && stationarity_residual <= STATIONARITY_TOL && sign_consistent;
    Ok(Certificate {
        max_over_b,
        min_over_x,
        gap,
        stationarity_residual,
        sign_consistent,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{two_agent_family, Cost};

    fn scalar_problem() -> ProblemSpec {
        ProblemSpec::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            Cost::scaled_identity(1.0),
            DVector::from_element(1, 1.0),
            DVector::zeros(1),
        )
    }

    #[test]
    fn two_agent_orthant_solution() {
        let spec = two_agent_family(2.0, 0.5, 2.0);
        let model = model::aggregate(&spec).unwrap();
        let s = solve_for_orthant(&model, &spec, &SignPattern::all_positive(2)).unwrap();
        assert!((s.x[0] - 3.5 / 9.5).abs() < 1e-14);
        assert!((s.x[1] - 0.25 / 9.5).abs() < 1e-14);
    }

    #[test]
    fn no_uncertainty_identity_mean_returns_target() {
        let spec = ProblemSpec::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            Cost::scaled_identity(0.0),
            DVector::from_vec(vec![0.3, -2.0]),
            DVector::zeros(2),
        );
        let model = model::aggregate(&spec).unwrap();
        let s = solve_for_orthant(&model, &spec, &SignPattern::all_positive(2)).unwrap();
        assert_eq!(s.x, spec.target);
    }

    #[test]
    fn scalar_problem_closed_form() {
        let sol = solve_robust(&scalar_problem(), &SolverOptions::default()).unwrap();
        assert!((sol.x_star[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!(sol.duality_gap <= 1e-12);
        assert!(sol.property_b);
    }

    #[test]
    fn two_agent_robust_solution() {
        let sol =
            solve_robust(&two_agent_family(2.0, 0.5, 2.0), &SolverOptions::default()).unwrap();
        assert_eq!(
            sol.worst_case.aggregate,
            DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 1.0, 2.0])
        );
        assert!((sol.x_star[0] - 3.5 / 9.5).abs() < 1e-12);
        assert!(sol.property_b);
        assert_eq!(sol.method, Method::SignIteration);
        assert!(
            verify_saddle(&two_agent_family(2.0, 0.5, 2.0), &sol)
                .unwrap()
                .pass
        );
    }

    #[test]
    fn degenerate_two_agent_instance_violates_property_b() {
        match solve_robust(&two_agent_family(2.0, 1.0, 2.0), &SolverOptions::default()) {
            Err(SolverError::PropertyBViolation { indices, candidate }) => {
                assert_eq!(indices, vec![1]);
                assert!(!candidate.property_b);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn exhaustive_agrees_with_iteration() {
        let spec = two_agent_family(2.0, 1.7, 2.0);
        let a = solve_robust(&spec, &SolverOptions::default()).unwrap();
        let b = solve_robust(
            &spec,
            &SolverOptions {
                search: SearchStrategy::Exhaustive,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(a.x_star, b.x_star);
        assert_eq!(b.method, Method::Exhaustive);
        assert_eq!(b.orthants_tried, 4);
    }

    #[test]
    fn exhaustive_limit() {
        let opts = SolverOptions {
            search: SearchStrategy::Exhaustive,
            n_max_exhaustive: 1,
            ..Default::default()
        };
        assert!(matches!(
            solve_robust(&two_agent_family(2.0, 0.5, 2.0), &opts),
            Err(SolverError::TooLarge { n: 2, max: 1 })
        ));
    }

    #[test]
    fn perturbed_point_fails_certificate() {
        let spec = two_agent_family(2.0, 0.5, 2.0);
        let mut sol = solve_robust(&spec, &SolverOptions::default()).unwrap();
        sol.x_star[0] += 0.1;
        let cert = verify_saddle(&spec, &sol).unwrap();
        assert!(!cert.pass);
        assert!(cert.gap > 0.0);
    }

    #[test]
    fn zero_uncertainty_certificate() {
        let spec = ProblemSpec::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            Cost::scaled_identity(1.0),
            DVector::from_vec(vec![1.0, -1.0]),
            DVector::zeros(2),
        );
        let sol = solve_robust(&spec, &SolverOptions::default()).unwrap();
        assert_eq!(sol.worst_case.aggregate, DMatrix::zeros(2, 2));
        let cert = verify_saddle(&spec, &sol).unwrap();
        assert!(cert.pass && cert.gap.abs() <= 1e-12);
    }
}
