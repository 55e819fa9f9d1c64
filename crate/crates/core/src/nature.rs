//! Nature's side of the game: the worst-case covariance given an intervention.
//!
//! For each receiving agent `i` Nature picks a covariance matrix `Bᵢ` of the
//! links `(G_i1, …, G_in)` with the variances `v_ij²` on the diagonal. Against
//! an intervention with sign pattern `s` the maximizer is the rank-1 matrix
//! `qᵢ⊗qᵢ` with `(qᵢ)_j = s_j·v_ij`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg;
use crate::model::{ProblemSpec, SignPattern};

/// Dykstra stops once the two projections agree to this (relative) level.
const DYKSTRA_TOL: f64 = 1e-13;
const DYKSTRA_MAX_ITERS: usize = 2000;
/// Residual distance to the constraint set beyond which pins are declared infeasible.
const INFEASIBLE_RTOL: f64 = 1e-7;
pub const ASCENT_MAX_ITERS: usize = 10_000;
pub const ASCENT_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NatureError {
    #[error("x has {found} entries, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("pin ({agent}, {j}, {k}) is out of range for n = {n}")]
    PinOutOfRange {
        agent: usize,
        j: usize,
        k: usize,
        n: usize,
    },
    #[error("pin ({agent}, {j}, {j}) = {value} conflicts with the variance {variance}")]
    DiagonalPin {
        agent: usize,
        j: usize,
        value: f64,
        variance: f64,
    },
    #[error("infeasible pins: |B[{agent}]({j},{k})| = {value} exceeds v_ij*v_ik = {bound}")]
    PinExceedsBound {
        agent: usize,
        j: usize,
        k: usize,
        value: f64,
        bound: f64,
    },
    #[error("infeasible pins: agent {agent} has no PSD completion (residual {residual:e})")]
    NoPsdCompletion { agent: usize, residual: f64 },
}

impl NatureError {
    /// True for the errors that mean the requested pins cannot be completed.
    pub fn is_infeasible_pins(&self) -> bool {
        matches!(
            self,
            NatureError::PinExceedsBound { .. } | NatureError::NoPsdCompletion { .. }
        )
    }
}

/// Per-agent worst-case covariance `qᵢ⊗qᵢ`, stored by its factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Rank1Covariance {
    pub agent: usize,
    pub factor: DVector<f64>,
}

impl Rank1Covariance {
    pub fn matrix(&self) -> DMatrix<f64> {
        linalg::outer(&self.factor, &self.factor)
    }

    /// `‖qᵢ‖² = σᵢ²`.
    pub fn trace(&self) -> f64 {
        self.factor.iter().map(|q| q * q).sum()
    }

    /// `⟨y, qᵢ⊗qᵢ y⟩ = ⟨qᵢ, y⟩²`.
    pub fn quad_form(&self, y: &DVector<f64>) -> f64 {
        let d = self.factor.dot(y);
        d * d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstCase {
    pub per_agent: Vec<Rank1Covariance>,
    /// `B* = Σᵢ Bᵢ*`, summed in agent order.
    pub aggregate: DMatrix<f64>,
    pub sign_pattern: SignPattern,
}

impl WorstCase {
    pub fn blocks(&self) -> Vec<DMatrix<f64>> {
        self.per_agent.iter().map(Rank1Covariance::matrix).collect()
    }
}

/// Rank-1 factor of agent `i` under sign pattern `signs`.
pub fn factor_for(std: &DMatrix<f64>, i: usize, signs: &SignPattern) -> DVector<f64> {
    DVector::from_fn(std.ncols(), |j, _| signs.get(j) * std[(i, j)])
}

/// Assembles Nature's best response to any intervention with sign pattern `signs`.
pub fn worst_case(signs: &SignPattern, spec: &ProblemSpec) -> WorstCase {
    worst_case_from_std(signs, &spec.std)
}

pub fn worst_case_from_std(signs: &SignPattern, std: &DMatrix<f64>) -> WorstCase {
    let n = std.ncols();
    let mut aggregate = DMatrix::<f64>::zeros(n, n);
    let per_agent: Vec<Rank1Covariance> = (0..std.nrows())
        .map(|i| {
            let factor = factor_for(std, i, signs);
            for j in 0..n {
                for k in 0..n {
                    aggregate[(j, k)] += factor[j] * factor[k];
                }
            }
            Rank1Covariance { agent: i, factor }
        })
        .collect();
    WorstCase {
        per_agent,
        aggregate,
        sign_pattern: signs.clone(),
    }
}

/// `max_{B} ⟨x, Bx⟩ = Σᵢ (Σⱼ v_ij |x_j|)²`.
pub fn inner_max_value(x: &DVector<f64>, spec: &ProblemSpec) -> f64 {
    inner_max_value_std(x, &spec.std)
}

pub fn inner_max_value_std(x: &DVector<f64>, std: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for i in 0..std.nrows() {
        let mut row = 0.0;
        for j in 0..std.ncols() {
            row += std[(i, j)] * x[j].abs();
        }
        total += row * row;
    }
    total
}

/// A fixed off-diagonal covariance `(Bᵢ)_{jk} = value` (indices 0-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pin {
    pub agent: usize,
    pub j: usize,
    pub k: usize,
    pub value: f64,
}

impl Pin {
    pub fn new(agent: usize, j: usize, k: usize, value: f64) -> Self {
        Self { agent, j, k, value }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockMax {
    pub value: f64,
    pub matrix: DMatrix<f64>,
    pub iterations: usize,
    /// The ascent result was replaced by an exact rank-1 matrix.
    pub snapped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerMax {
    pub value: f64,
    pub blocks: Vec<DMatrix<f64>>,
    pub aggregate: DMatrix<f64>,
    pub iterations: usize,
}

/// Numerical inner maximizer of `⟨x, Bx⟩` with some covariances pinned.
pub fn constrained_inner_max(
    x: &DVector<f64>,
    spec: &ProblemSpec,
    fixed: &[Pin],
) -> Result<InnerMax, NatureError> {
    let n = spec.n();
    if x.len() != n {
        return Err(NatureError::Dimension {
            expected: n,
            found: x.len(),
        });
    }
    let w = linalg::outer(x, x);
    let weights = vec![w; n];
    maximize_blocks(&weights, &spec.std, fixed)
}

/// Maximizes `Σᵢ ⟨Wᵢ, Bᵢ⟩` agent by agent.
pub fn maximize_blocks(
    weights: &[DMatrix<f64>],
    std: &DMatrix<f64>,
    fixed: &[Pin],
) -> Result<InnerMax, NatureError> {
    let n = std.ncols();
    for p in fixed {
        if p.agent >= std.nrows() || p.j >= n || p.k >= n {
            return Err(NatureError::PinOutOfRange {
                agent: p.agent,
                j: p.j,
                k: p.k,
                n,
            });
        }
    }
    let mut blocks = Vec::with_capacity(weights.len());
    let mut aggregate = DMatrix::<f64>::zeros(n, n);
    let mut value = 0.0;
    let mut iterations = 0;
    for (i, w) in weights.iter().enumerate() {
        let variances: Vec<f64> = (0..n).map(|j| std[(i, j)] * std[(i, j)]).collect();
        let pins: Vec<(usize, usize, f64)> = fixed
            .iter()
            .filter(|p| p.agent == i)
            .map(|p| (p.j, p.k, p.value))
            .collect();
        let r = maximize_block(i, w, &std.row(i).transpose(), &variances, &pins)?;
        value += r.value;
        iterations = iterations.max(r.iterations);
        aggregate += &r.matrix;
        blocks.push(r.matrix);
    }
    Ok(InnerMax {
        value,
        blocks,
        aggregate,
        iterations,
    })
}

/// Affine constraint set: fixed diagonal plus pinned symmetric pairs.
struct Constraints<'a> {
    variances: &'a [f64],
    pins: &'a [(usize, usize, f64)],
}

impl Constraints<'_> {
    fn project(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = linalg::symmetrize(b);
        for (j, &d) in self.variances.iter().enumerate() {
            out[(j, j)] = d;
        }
        for &(j, k, v) in self.pins {
            out[(j, k)] = v;
            out[(k, j)] = v;
        }
        out
    }

    fn satisfied_by(&self, b: &DMatrix<f64>, tol: f64) -> bool {
        self.variances
            .iter()
            .enumerate()
            .all(|(j, &d)| (b[(j, j)] - d).abs() <= tol)
            && self
                .pins
                .iter()
                .all(|&(j, k, v)| (b[(j, k)] - v).abs() <= tol)
    }
}

/// Dykstra alternating projection onto {affine constraints} ∩ PSD.
/// Returns the affine-side iterate and the final distance between the two sides.
fn project_feasible(y: &DMatrix<f64>, cons: &Constraints, scale: f64) -> (DMatrix<f64>, f64) {
    let n = y.nrows();
    let mut x = y.clone();
    let mut p = DMatrix::<f64>::zeros(n, n);
    let mut q = DMatrix::<f64>::zeros(n, n);
    let mut a = cons.project(&x);
    let mut gap = f64::INFINITY;
    for _ in 0..DYKSTRA_MAX_ITERS {
        a = cons.project(&(&x + &p));
        p = &x + &p - &a;
        let s = linalg::project_psd(&(&a + &q));
        q = &a + &q - &s;
        gap = (&s - &a).norm();
        x = s;
        if gap <= DYKSTRA_TOL * scale {
            break;
        }
    }
    (a, gap)
}

fn block_value(w: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    linalg::frobenius_dot(w, b)
}

/// Maximizes `⟨W, B⟩` over PSD `B` with `diag(B) = v²` and the given pins.
pub fn maximize_block(
    agent: usize,
    w: &DMatrix<f64>,
    v: &DVector<f64>,
    variances: &[f64],
    pins: &[(usize, usize, f64)],
) -> Result<BlockMax, NatureError> {
    let n = variances.len();
    for &(j, k, value) in pins {
        if j == k {
            if value != variances[j] {
                return Err(NatureError::DiagonalPin {
                    agent,
                    j,
                    value,
                    variance: variances[j],
                });
            }
            continue;
        }
        let bound = v[j].abs() * v[k].abs();
        if value.abs() > bound * (1.0 + 1e-12) {
            return Err(NatureError::PinExceedsBound {
                agent,
                j,
                k,
                value,
                bound,
            });
        }
    }
    let cons = Constraints { variances, pins };
    let sigma_sq: f64 = variances.iter().sum();
    let scale = sigma_sq.max(f64::MIN_POSITIVE);

    if sigma_sq == 0.0 {
        return Ok(BlockMax {
            value: 0.0,
            matrix: DMatrix::zeros(n, n),
            iterations: 0,
            snapped: false,
        });
    }

    // start from the diagonal matrix with the pins filled in
    let (mut b, gap0) = project_feasible(
        &cons.project(&DMatrix::from_diagonal(&DVector::from_column_slice(
            variances,
        ))),
        &cons,
        scale,
    );
    if gap0 > INFEASIBLE_RTOL * scale {
        return Err(NatureError::NoPsdCompletion {
            agent,
            residual: gap0,
        });
    }
    let wnorm = w.norm();
    let mut value = block_value(w, &b);
    let mut iterations = 0;
    if wnorm > 0.0 {
        let step = sigma_sq / (2.0 * wnorm);
        while iterations < ASCENT_MAX_ITERS {
            iterations += 1;
            let (next, _) = project_feasible(&(&b + w * step), &cons, scale);
            let next_value = block_value(w, &next);
            let change = (next_value - value).abs();
            b = next;
            value = next_value;
            if change < ASCENT_RTOL * (1.0 + value.abs()) {
                break;
            }
        }
    }
    let (b, residual) = project_feasible(&b, &cons, scale);
    if residual > INFEASIBLE_RTOL * scale {
        return Err(NatureError::NoPsdCompletion { agent, residual });
    }
    let value = block_value(w, &b);

    // snap to the exact rank-1 extreme point suggested by the leading eigenvector
    let (_, vecs) = linalg::sym_eigen_desc(&b);
    let u = vecs.column(0);
    let q = DVector::from_fn(n, |j, _| if u[j] < 0.0 { -v[j].abs() } else { v[j].abs() });
    let snap = linalg::outer(&q, &q);
    let snap_value = block_value(w, &snap);
    if cons.satisfied_by(&snap, 1e-12 * scale) && snap_value >= value - 1e-9 * (1.0 + value.abs()) {
        return Ok(BlockMax {
            value: snap_value,
            matrix: snap,
            iterations,
            snapped: true,
        });
    }
    Ok(BlockMax {
        value,
        matrix: b,
        iterations,
        snapped: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Cost;

    fn spec_with_std(std: &[f64]) -> ProblemSpec {
        ProblemSpec::new(
            DMatrix::identity(2, 2),
            DMatrix::from_row_slice(2, 2, std),
            Cost::scaled_identity(1.0),
            DVector::from_element(2, 1.0),
            DVector::zeros(2),
        )
    }

    #[test]
    fn agent_block_with_mixed_signs() {
        let spec = spec_with_std(&[2.0, 3.0, 1.0, 1.0]);
        let wc = worst_case(&SignPattern::new(vec![1, -1]).unwrap(), &spec);
        assert_eq!(
            wc.per_agent[0].matrix(),
            DMatrix::from_row_slice(2, 2, &[4.0, -6.0, -6.0, 9.0])
        );
    }

    #[test]
    fn all_positive_signs_give_positive_products() {
        let spec = spec_with_std(&[2.0, 3.0, 1.0, 0.5]);
        let wc = worst_case(&SignPattern::all_positive(2), &spec);
        assert_eq!(wc.per_agent[0].matrix()[(0, 1)], 6.0);
        assert_eq!(wc.per_agent[1].matrix()[(1, 0)], 0.5);
    }

    #[test]
    fn two_agent_family_aggregate() {
        let spec = crate::model::two_agent_family(2.0, 0.5, 2.0);
        let wc = worst_case(&SignPattern::all_positive(2), &spec);
        assert_eq!(
            wc.aggregate,
            DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 1.0, 2.0])
        );
    }

    #[test]
    fn inner_value_closed_form() {
        let spec = spec_with_std(&[2.0, 3.0, 1.0, 1.0]);
        let x = DVector::from_vec(vec![1.0, -1.0]);
        assert_eq!(inner_max_value(&x, &spec), 29.0);
        let wc = worst_case(&SignPattern::of(&x), &spec);
        assert_eq!(linalg::quad_form(&wc.aggregate, &x), 29.0);
        assert_eq!(inner_max_value(&DVector::zeros(2), &spec), 0.0);
    }

    #[test]
    fn single_agent_inner_value() {
        let std = DMatrix::from_element(1, 1, 0.7);
        let x = DVector::from_element(1, -3.0);
        assert!((inner_max_value_std(&x, &std) - 0.7 * 0.7 * 9.0).abs() < 1e-14);
    }

    #[test]
    fn unpinned_numeric_max_matches_closed_form() {
        let spec = spec_with_std(&[2.0, 3.0, 1.0, 1.0]);
        let x = DVector::from_vec(vec![1.0, -1.0]);
        let r = constrained_inner_max(&x, &spec, &[]).unwrap();
        assert!((r.value - 29.0).abs() < 1e-9, "{}", r.value);
    }

    #[test]
    fn pinned_zero_covariance_removes_cross_term() {
        let spec = spec_with_std(&[2.0, 3.0, 1.0, 1.0]);
        let x = DVector::from_vec(vec![1.0, -1.0]);
        let r = constrained_inner_max(&x, &spec, &[Pin::new(0, 0, 1, 0.0)]).unwrap();
        // agent 0: 4 + 9, agent 1 free: (1 + 1)²
        assert!((r.value - 17.0).abs() < 1e-9, "{}", r.value);
        assert_eq!(r.blocks[0][(0, 1)], 0.0);
    }

    #[test]
    fn pin_beyond_cauchy_schwarz_is_infeasible() {
        let spec = spec_with_std(&[2.0, 3.0, 1.0, 1.0]);
        let x = DVector::from_vec(vec![1.0, -1.0]);
        let err = constrained_inner_max(&x, &spec, &[Pin::new(0, 0, 1, 6.1)]).unwrap_err();
        assert!(err.is_infeasible_pins());
    }

    #[test]
    fn uncompletable_pins_in_three_dimensions() {
        // correlations (1,2) = 1, (1,3) = 1, (2,3) = -1 are pairwise fine but jointly not PSD
        let std = DMatrix::from_element(1, 3, 1.0);
        let w = DMatrix::identity(3, 3);
        let pins = [(0, 1, 1.0), (0, 2, 1.0), (1, 2, -1.0)];
        let err = maximize_block(0, &w, &std.row(0).transpose(), &[1.0; 3], &pins).unwrap_err();
        assert!(matches!(err, NatureError::NoPsdCompletion { .. }));
    }
}
