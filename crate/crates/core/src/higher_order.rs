//! Second-order network effects: outcome `(I + εG + ε²G²)x` with `ε = √δ`.
//!
//! Rows of `G` are independent and `G_ii = 0`. With zero means the expected
//! loss is `‖x‖² + Σᵢ κᵢ⟨x, Bᵢx⟩ − 2⟨z, x⟩ + ‖z‖²` where
//! `κᵢ = δ + δ²Σ_k v_ki²` (incoming column sums). With general means
//! `Ḡ = mean` it becomes
//!
//! ```text
//! Σ_k [δ²α_k⟨x, B_k x⟩ + δ⟨Px, B_k Px⟩] + ‖Ax − z‖²
//! ```
//!
//! with `P = I + εḠ`, `A = I + εḠ + ε²Ḡ²` and `α_k = Σᵢ(v_ik² + m_ik²)`.
//! The deviation cost of the base problem is not part of this objective.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::model::{self, Cost, ModelError, ProblemSpec, SignPattern};
use crate::nature::{self, NatureError};
use crate::solver::{self, RobustSolution, SolverError, SolverOptions};

/// Diagonal means must vanish to this absolute level.
pub const ZERO_DIAG_TOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HoError {
    #[error("delta must be positive and finite (got {0})")]
    InvalidDelta(f64),
    #[error("self-influence mean m_{i}{i} = {value} must be zero")]
    NonzeroDiagonal { i: usize, value: f64 },
    #[error("interaction order {order} is not supported: only orders 1 and 2 keep the objective linear in each covariance block")]
    UnsupportedOrder { order: u32 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("intervention has zero entries at {indices:?}")]
    ZeroEntry { indices: Vec<usize> },
    #[error("nondegeneracy fails for (agent, j, k) = {pairs:?}")]
    NondegeneracyFailure { pairs: Vec<(usize, usize, usize)> },
    #[error("the robust solve needs zero means; this problem has nonzero means")]
    NotZeroMean,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nature(#[from] NatureError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HigherOrderSpec {
    pub base: ProblemSpec,
    pub delta: f64,
}

impl HigherOrderSpec {
    pub fn new(base: ProblemSpec, delta: f64) -> Self {
        Self { base, delta }
    }

    pub fn n(&self) -> usize {
        self.base.n()
    }

    pub fn is_zero_mean(&self) -> bool {
        self.base.mean.iter().all(|&m| m == 0.0)
    }

    /// Checks δ, the zero self-influence assumption and the base problem.
    /// Returns warnings for assumptions that are not enforced.
    pub fn validate(&self) -> Result<Vec<String>, HoError> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(HoError::InvalidDelta(self.delta));
        }
        model::ensure_solvable(&self.base)?;
        let mut warnings = Vec::new();
        for i in 0..self.n() {
            let value = self.base.mean[(i, i)];
            if value.abs() > ZERO_DIAG_TOL {
                return Err(HoError::NonzeroDiagonal { i, value });
            }
            if self.base.std[(i, i)] != 0.0 {
                warnings.push(format!(
                    "std[{i}][{i}] = {} is nonzero although self-influence is assumed absent",
                    self.base.std[(i, i)]
                ));
            }
        }
        Ok(warnings)
    }

    fn epsilon(&self) -> f64 {
        self.delta.sqrt()
    }
}

/// Rejects interaction orders the model does not cover.
pub fn check_order(order: u32) -> Result<(), HoError> {
    if order == 0 || order > 2 {
        return Err(HoError::UnsupportedOrder { order });
    }
    Ok(())
}

/// Per-agent weights. `kappa` is the zero-mean multiplier of `⟨x, Bᵢx⟩`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HOWeights {
    pub kappa: Vec<f64>,
    pub alpha: Vec<f64>,
}

pub fn ho_weights(hspec: &HigherOrderSpec) -> HOWeights {
    let n = hspec.n();
    let d = hspec.delta;
    let std = &hspec.base.std;
    let mean = &hspec.base.mean;
    let mut kappa = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    for k in 0..n {
        let mut var = 0.0;
        let mut mean_sq = 0.0;
        for i in 0..n {
            var += std[(i, k)] * std[(i, k)];
            mean_sq += mean[(i, k)] * mean[(i, k)];
        }
        kappa.push(d * (1.0 + d * var));
        alpha.push(var + mean_sq);
    }
    HOWeights { kappa, alpha }
}

/// `y = (I + εḠ)x`.
pub fn propagated(hspec: &HigherOrderSpec, x: &DVector<f64>) -> DVector<f64> {
    x + &hspec.base.mean * x * hspec.epsilon()
}

/// `Ax = (I + εḠ + ε²Ḡ²)x`.
fn mean_outcome(hspec: &HigherOrderSpec, x: &DVector<f64>) -> DVector<f64> {
    let e = hspec.epsilon();
    let gx = &hspec.base.mean * x;
    let ggx = &hspec.base.mean * &gx;
    x + gx * e + ggx * (e * e)
}

/// Matrices `Wᵢ` with objective `Σᵢ⟨Wᵢ, Bᵢ⟩ + ‖Ax − z‖²`.
pub fn general_weights(hspec: &HigherOrderSpec, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
    let d = hspec.delta;
    let w = ho_weights(hspec);
    let y = propagated(hspec, x);
    let xx = linalg::outer(x, x);
    let yy = linalg::outer(&y, &y);
    w.alpha
        .iter()
        .map(|&a| &xx * (d * d * a) + &yy * d)
        .collect()
}

fn check_dims(
    hspec: &HigherOrderSpec,
    x: &DVector<f64>,
    blocks: Option<&[DMatrix<f64>]>,
) -> Result<(), HoError> {
    let n = hspec.n();
    if x.len() != n {
        return Err(HoError::Dimension(format!(
            "x has {} entries, expected {n}",
            x.len()
        )));
    }
    if let Some(blocks) = blocks {
        if blocks.len() != n || blocks.iter().any(|b| b.nrows() != n || b.ncols() != n) {
            return Err(HoError::Dimension(format!(
                "expected {n} blocks of size {n}x{n}"
            )));
        }
    }
    Ok(())
}

/// Expected squared distance to the target under the covariances `blocks`.
pub fn ho_objective(
    hspec: &HigherOrderSpec,
    x: &DVector<f64>,
    blocks: &[DMatrix<f64>],
) -> Result<f64, HoError> {
    check_dims(hspec, x, Some(blocks))?;
    let z = &hspec.base.target;
    if hspec.is_zero_mean() {
        let w = ho_weights(hspec);
        let mut total = x.dot(x) - 2.0 * z.dot(x) + z.dot(z);
        for (k, b) in blocks.iter().enumerate() {
            total += w.kappa[k] * linalg::quad_form(b, x);
        }
        return Ok(total);
    }
    let r = mean_outcome(hspec, x) - z;
    let mut total = r.dot(&r);
    for (w, b) in general_weights(hspec, x).iter().zip(blocks) {
        total += linalg::frobenius_dot(w, b);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HoPath {
    ZeroMean,
    General,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoWorstCase {
    pub blocks: Vec<DMatrix<f64>>,
    pub path: HoPath,
    /// Second singular value of each block relative to its trace.
    pub rank_ratio: Vec<f64>,
    /// Agents whose numerical maximizer is not rank 1 although nondegeneracy holds.
    pub discrepancies: Vec<usize>,
}

/// Rank-1 threshold on the second singular value relative to the trace.
const RANK1_RTOL: f64 = 1e-8;

fn rank_ratio(b: &DMatrix<f64>) -> f64 {
    let sv = linalg::singular_values(b);
    let tr = b.trace();
    if tr <= 0.0 || sv.len() < 2 {
        0.0
    } else {
        sv[1] / tr
    }
}

/// Agent/pair combinations where the weight `δ²αᵢx_jx_k + δy_jy_k` vanishes.
pub fn nondegeneracy_failures(
    hspec: &HigherOrderSpec,
    x: &DVector<f64>,
) -> Vec<(usize, usize, usize)> {
    let n = hspec.n();
    let weights = general_weights(hspec, x);
    let mut out = Vec::new();
    for (i, w) in weights.iter().enumerate() {
        let scale = linalg::max_abs(w);
        for j in 0..n {
            for k in (j + 1)..n {
                let coupled = hspec.base.std[(i, j)] * hspec.base.std[(i, k)] > 0.0;
                if coupled && w[(j, k)].abs() <= 1e-12 * scale {
                    out.push((i, j, k));
                }
            }
        }
    }
    out
}

/// Nature's best response to `x`.
pub fn ho_worst_case(hspec: &HigherOrderSpec, x: &DVector<f64>) -> Result<HoWorstCase, HoError> {
    hspec.validate()?;
    ho_worst_case_on(hspec, x, hspec.is_zero_mean())
}

/// Same as [`ho_worst_case`] with the path chosen by the caller.
pub fn ho_worst_case_on(
    hspec: &HigherOrderSpec,
    x: &DVector<f64>,
    zero_mean: bool,
) -> Result<HoWorstCase, HoError> {
    check_dims(hspec, x, None)?;
    let zeros: Vec<usize> = (0..x.len()).filter(|&j| x[j] == 0.0).collect();
    if !zeros.is_empty() {
        return Err(HoError::ZeroEntry { indices: zeros });
    }
    if zero_mean {
        let blocks = nature::worst_case(&SignPattern::of(x), &hspec.base).blocks();
        let rank_ratio = blocks.iter().map(rank_ratio).collect();
        return Ok(HoWorstCase {
            blocks,
            path: HoPath::ZeroMean,
            rank_ratio,
            discrepancies: Vec::new(),
        });
    }
    let failures = nondegeneracy_failures(hspec, x);
    if !failures.is_empty() {
        return Err(HoError::NondegeneracyFailure { pairs: failures });
    }
    let weights = general_weights(hspec, x);
    let inner = nature::maximize_blocks(&weights, &hspec.base.std, &[])?;
    let rank_ratio: Vec<f64> = inner.blocks.iter().map(rank_ratio).collect();
    let discrepancies: Vec<usize> = rank_ratio
        .iter()
        .enumerate()
        .filter(|(_, &r)| r > RANK1_RTOL)
        .map(|(i, _)| i)
        .collect();
    for &i in &discrepancies {
        log::warn!(
            "agent {i}: numerical worst case has rank ratio {:e} although nondegeneracy holds",
            rank_ratio[i]
        );
    }
    Ok(HoWorstCase {
        blocks: inner.blocks,
        path: HoPath::General,
        rank_ratio,
        discrepancies,
    })
}

/// Base problem whose stationarity system is `(I + Σκᵢ Bᵢ*(s))x = z`.
fn equivalent_problem(hspec: &HigherOrderSpec) -> ProblemSpec {
    let n = hspec.n();
    let w = ho_weights(hspec);
    let std = DMatrix::from_fn(n, n, |i, j| w.kappa[i].sqrt() * hspec.base.std[(i, j)]);
    ProblemSpec::new(
        DMatrix::identity(n, n),
        std,
        Cost::scaled_identity(0.0),
        hspec.base.target.clone(),
        DVector::zeros(n),
    )
}

/// Robust intervention for the zero-mean second-order model.
///
/// The returned `worst_case` holds the unweighted blocks `Bᵢ*`; `objective`
/// is the expected squared distance (no ½).
pub fn ho_solve(
    hspec: &HigherOrderSpec,
    options: &SolverOptions,
) -> Result<RobustSolution, HoError> {
    let mut warnings = hspec.validate()?;
    if !hspec.is_zero_mean() {
        return Err(HoError::NotZeroMean);
    }
    let equiv = equivalent_problem(hspec);
    let convert =
        |mut sol: RobustSolution, warnings: Vec<String>| -> Result<RobustSolution, HoError> {
            let half = sol.objective;
            let abs_gap = sol.duality_gap * (1.0 + half.abs());
            sol.worst_case = nature::worst_case(&sol.worst_case.sign_pattern, &hspec.base);
            sol.objective = ho_objective(hspec, &sol.x_star, &sol.worst_case.blocks())?;
            sol.duality_gap = 2.0 * abs_gap / (1.0 + sol.objective.abs());
            sol.warnings.retain(|w| !w.starts_with("mean influence"));
            let mut all = warnings;
            all.append(&mut sol.warnings);
            sol.warnings = all;
            Ok(sol)
        };
    match solver::solve_robust(&equiv, options) {
        Ok(sol) => convert(sol, std::mem::take(&mut warnings)),
        Err(SolverError::PropertyBViolation { indices, candidate }) => {
            let candidate = convert(*candidate, warnings)?;
            Err(HoError::Solver(SolverError::PropertyBViolation {
                indices,
                candidate: Box::new(candidate),
            }))
        }
        Err(e) => Err(e.into()),
    }
}
