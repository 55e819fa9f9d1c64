//! Worst case when a new agent `n+1` joins and only its covariances are unknown.
//!
//! Existing agent `i` keeps its known block `Bᵢ` and Nature chooses the new
//! column `βᵢ` (covariances of `G_{i,n+1}` with `G_{ij}`), subject to the
//! completion staying PSD: `βᵢᵀBᵢ⁻¹βᵢ ≤ bᵢ`. Some entries of `βᵢ` may be
//! known. The new agent's own row is entirely unknown and follows the rank-1
//! rule of [`crate::nature`].

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::diagnostics::objective_with_model;
use crate::linalg::{self, LinalgError};
use crate::model::{self, ModelError, ProblemSpec, SignPattern};
use crate::nature::{factor_for, Rank1Covariance};

/// Smallest eigenvalue of a base block must exceed this fraction of its trace.
const PD_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExpansionError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("base block {agent} is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    BaseBlockNotPd { agent: usize, min_eigenvalue: f64 },
    #[error("new-link variance of agent {agent} must be positive (got {value})")]
    NonPositiveVariance { agent: usize, value: f64 },
    #[error("invalid pin for agent {agent}: {reason}")]
    InvalidPin { agent: usize, reason: String },
    #[error("empty feasible set for agent {agent}: pinned entries need b - p'B_PP^-1 p >= 0, got {slack:e}")]
    EmptyFeasibleSet { agent: usize, slack: f64 },
    #[error("zero gradient for agent {agent}: every free coefficient 2*x_j*x_(n+1) vanishes, the maximizer is not unique")]
    ZeroGradient { agent: usize },
    #[error(
        "intervention has zero entries at {indices:?}; the new-agent worst case is not unique"
    )]
    ZeroEntry { indices: Vec<usize> },
    #[error("no intervention x_bar supplied")]
    MissingIntervention,
    #[error("best-response iteration did not converge in {iterations} iterations (last step {last_step:e})")]
    MaxIterations { iterations: usize, last_step: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A known covariance `(B̄ᵢ)_{j,n+1} = value` between an existing link and the new one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinnedEntry {
    pub agent: usize,
    pub j: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionSpec {
    /// Known `n×n` covariance block of every existing agent.
    pub base_blocks: Vec<DMatrix<f64>>,
    /// `bᵢ = Var(G_{i,n+1})` for `i = 1..n+1`.
    pub new_variances: DVector<f64>,
    pub pinned: Vec<PinnedEntry>,
    pub x_bar: Option<DVector<f64>>,
    /// Standard deviations `v_{n+1,j}` of the new agent's incoming links.
    pub new_agent_std: DVector<f64>,
}

impl ExpansionSpec {
    /// Unit new-link variances and unit new-agent standard deviations.
    pub fn with_defaults(base_blocks: Vec<DMatrix<f64>>) -> Self {
        let n = base_blocks.len();
        Self {
            base_blocks,
            new_variances: DVector::from_element(n + 1, 1.0),
            pinned: Vec::new(),
            x_bar: None,
            new_agent_std: DVector::from_element(n + 1, 1.0),
        }
    }

    /// Number of existing agents.
    pub fn n(&self) -> usize {
        self.base_blocks.len()
    }

    pub fn validate(&self) -> Result<(), ExpansionError> {
        let n = self.n();
        if n == 0 {
            return Err(ExpansionError::Dimension("no existing agents".into()));
        }
        for (i, b) in self.base_blocks.iter().enumerate() {
            if b.nrows() != n || b.ncols() != n {
                return Err(ExpansionError::Dimension(format!(
                    "base block {i} is {}x{}, expected {n}x{n}",
                    b.nrows(),
                    b.ncols()
                )));
            }
            if !linalg::is_symmetric(b, 1e-12) {
                return Err(ExpansionError::BaseBlockNotPd {
                    agent: i,
                    min_eigenvalue: f64::NAN,
                });
            }
            let lo = linalg::min_eigenvalue(b);
            if !(lo > PD_RTOL * b.trace().abs()) {
                return Err(ExpansionError::BaseBlockNotPd {
                    agent: i,
                    min_eigenvalue: lo,
                });
            }
        }
        if self.new_variances.len() != n + 1 {
            return Err(ExpansionError::Dimension(format!(
                "new_variances has {} entries, expected {}",
                self.new_variances.len(),
                n + 1
            )));
        }
        if self.new_agent_std.len() != n + 1 {
            return Err(ExpansionError::Dimension(format!(
                "new_agent_std has {} entries, expected {}",
                self.new_agent_std.len(),
                n + 1
            )));
        }
        for (i, &b) in self.new_variances.iter().enumerate() {
            if !(b > 0.0 && b.is_finite()) {
                return Err(ExpansionError::NonPositiveVariance { agent: i, value: b });
            }
        }
        let own = self.new_agent_std[n] * self.new_agent_std[n];
        if (own - self.new_variances[n]).abs() > 1e-12 * own.max(self.new_variances[n]) {
            return Err(ExpansionError::Dimension(format!(
                "new_variances[{n}] = {} disagrees with new_agent_std[{n}]^2 = {own}",
                self.new_variances[n]
            )));
        }
        if self
            .new_agent_std
            .iter()
            .any(|v| !(*v > 0.0 && v.is_finite()))
        {
            return Err(ExpansionError::Dimension(
                "new_agent_std must be positive".into(),
            ));
        }
        for p in &self.pinned {
            if p.agent >= n || p.j >= n {
                return Err(ExpansionError::InvalidPin {
                    agent: p.agent,
                    reason: format!("index ({}, {}) out of range for n = {n}", p.agent, p.j),
                });
            }
            if !p.value.is_finite() {
                return Err(ExpansionError::InvalidPin {
                    agent: p.agent,
                    reason: "non-finite value".into(),
                });
            }
        }
        if let Some(x) = &self.x_bar {
            if x.len() != n + 1 {
                return Err(ExpansionError::Dimension(format!(
                    "x_bar has {} entries, expected {}",
                    x.len(),
                    n + 1
                )));
            }
        }
        Ok(())
    }

    fn pins_for(&self, agent: usize) -> Vec<(usize, f64)> {
        self.pinned
            .iter()
            .filter(|p| p.agent == agent)
            .map(|p| (p.j, p.value))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceMax {
    pub beta: DVector<f64>,
    /// `βᵀB⁻¹β − b`, zero on the boundary.
    pub boundary_residual: f64,
}

fn submatrix(b: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| b[(rows[r], cols[c])])
}

/// Maximizes `⟨c, β⟩` over `{β : βᵀB⁻¹β ≤ b, β_j = p_j for pinned j}`.
///
/// After eliminating the pinned coordinates the free part lives in the
/// ellipsoid `uᵀS⁻¹u ≤ r` with `S = B_FF − B_FP B_PP⁻¹ B_PF`,
/// `r = b − pᵀB_PP⁻¹p` and `β_F = u + B_FP B_PP⁻¹ p`.
pub fn slice_ellipsoid_max(
    b_mat: &DMatrix<f64>,
    b: f64,
    pinned: &[(usize, f64)],
    c: &DVector<f64>,
) -> Result<SliceMax, ExpansionError> {
    slice_for_agent(0, b_mat, b, pinned, c)
}

fn slice_for_agent(
    agent: usize,
    b_mat: &DMatrix<f64>,
    b: f64,
    pinned: &[(usize, f64)],
    c: &DVector<f64>,
) -> Result<SliceMax, ExpansionError> {
    let n = b_mat.nrows();
    if c.len() != n {
        return Err(ExpansionError::Dimension(format!(
            "gradient has {} entries, expected {n}",
            c.len()
        )));
    }
    let mut pinned_idx: Vec<usize> = Vec::new();
    let mut p_vals: Vec<f64> = Vec::new();
    for &(j, v) in pinned {
        if j >= n {
            return Err(ExpansionError::InvalidPin {
                agent,
                reason: format!("index {j} out of range"),
            });
        }
        if let Some(pos) = pinned_idx.iter().position(|&k| k == j) {
            if p_vals[pos] != v {
                return Err(ExpansionError::InvalidPin {
                    agent,
                    reason: format!("index {j} pinned twice"),
                });
            }
            continue;
        }
        pinned_idx.push(j);
        p_vals.push(v);
    }
    let free: Vec<usize> = (0..n).filter(|j| !pinned_idx.contains(j)).collect();
    let c_free = DVector::from_fn(free.len(), |r, _| c[free[r]]);
    if c_free.iter().all(|&v| v == 0.0) {
        return Err(ExpansionError::ZeroGradient { agent });
    }

    let mut beta = DVector::<f64>::zeros(n);
    let (s, r, shift) = if pinned_idx.is_empty() {
        (b_mat.clone(), b, DVector::zeros(n))
    } else {
        let p = DVector::from_vec(p_vals.clone());
        let b_pp = submatrix(b_mat, &pinned_idx, &pinned_idx);
        let b_fp = submatrix(b_mat, &free, &pinned_idx);
        let ch = linalg::Cholesky::factor(&b_pp)?;
        let b_pp_inv_p = ch.solve(&p);
        let r = b - p.dot(&b_pp_inv_p);
        if r < 0.0 {
            return Err(ExpansionError::EmptyFeasibleSet { agent, slack: r });
        }
        let mut b_pp_inv_b_pf = DMatrix::<f64>::zeros(pinned_idx.len(), free.len());
        for col in 0..free.len() {
            let rhs = DVector::from_fn(pinned_idx.len(), |row, _| b_fp[(col, row)]);
            b_pp_inv_b_pf.set_column(col, &ch.solve(&rhs));
        }
        let s = submatrix(b_mat, &free, &free) - &b_fp * &b_pp_inv_b_pf;
        let shift = &b_fp * &b_pp_inv_p;
        for (pos, &j) in pinned_idx.iter().enumerate() {
            beta[j] = p_vals[pos];
        }
        (s, r, shift)
    };
    let sc = &s * &c_free;
    let denom = c_free.dot(&sc);
    let u = if denom > 0.0 {
        sc * (r.sqrt() / denom.sqrt())
    } else {
        DVector::zeros(free.len())
    };
    for (pos, &j) in free.iter().enumerate() {
        beta[j] = u[pos] + shift[pos];
    }
    let boundary_residual = match linalg::Cholesky::factor(b_mat) {
        Ok(ch) => beta.dot(&ch.solve(&beta)) - b,
        Err(_) => f64::NAN,
    };
    Ok(SliceMax {
        beta,
        boundary_residual,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedWorstCase {
    /// Completion column `βᵢ` of every existing agent.
    pub betas: Vec<DVector<f64>>,
    /// Rank-1 block of the new agent over all `n+1` coordinates.
    pub new_agent: Rank1Covariance,
    /// Completed `(n+1)×(n+1)` blocks, existing agents first.
    pub blocks: Vec<DMatrix<f64>>,
    pub aggregate: DMatrix<f64>,
}

/// Nature's best response against `espec.x_bar`.
pub fn expansion_worst_case(espec: &ExpansionSpec) -> Result<ExpandedWorstCase, ExpansionError> {
    let x = espec
        .x_bar
        .clone()
        .ok_or(ExpansionError::MissingIntervention)?;
    expansion_worst_case_at(espec, &x)
}

/// Nature's best response against the intervention `x`.
pub fn expansion_worst_case_at(
    espec: &ExpansionSpec,
    x: &DVector<f64>,
) -> Result<ExpandedWorstCase, ExpansionError> {
    espec.validate()?;
    let n = espec.n();
    if x.len() != n + 1 {
        return Err(ExpansionError::Dimension(format!(
            "x has {} entries, expected {}",
            x.len(),
            n + 1
        )));
    }
    let c = DVector::from_fn(n, |j, _| 2.0 * x[j] * x[n]);
    let mut betas = Vec::with_capacity(n);
    let mut blocks = Vec::with_capacity(n + 1);
    for (i, b_i) in espec.base_blocks.iter().enumerate() {
        let sm = slice_for_agent(i, b_i, espec.new_variances[i], &espec.pins_for(i), &c)?;
        let mut full = DMatrix::<f64>::zeros(n + 1, n + 1);
        full.view_mut((0, 0), (n, n)).copy_from(b_i);
        for j in 0..n {
            full[(j, n)] = sm.beta[j];
            full[(n, j)] = sm.beta[j];
        }
        full[(n, n)] = espec.new_variances[i];
        betas.push(sm.beta);
        blocks.push(full);
    }
    let zeros: Vec<usize> = (0..=n).filter(|&j| x[j] == 0.0).collect();
    if !zeros.is_empty() {
        return Err(ExpansionError::ZeroEntry { indices: zeros });
    }
    let signs = SignPattern::of(x);
    let std_row = DMatrix::from_row_slice(1, n + 1, espec.new_agent_std.as_slice());
    let new_agent = Rank1Covariance {
        agent: n,
        factor: factor_for(&std_row, 0, &signs),
    };
    blocks.push(new_agent.matrix());
    let mut aggregate = DMatrix::<f64>::zeros(n + 1, n + 1);
    for b in &blocks {
        aggregate += b;
    }
    Ok(ExpandedWorstCase {
        betas,
        new_agent,
        blocks,
        aggregate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionOptions {
    /// Weight of the new best response in each update.
    pub damping: f64,
    pub max_iterations: usize,
    pub tol: f64,
}

impl Default for ExpansionOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            max_iterations: 10_000,
            tol: 1e-10,
        }
    }
}

/// Result of the (experimental) decision-maker solve on the expanded network.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionSolution {
    pub x: DVector<f64>,
    pub worst_case: ExpandedWorstCase,
    pub objective: f64,
    /// `f(x, 0) + ½⟨x, B̄(x) x⟩`, Nature's best value against `x`.
    pub upper: f64,
    /// `min_y f(y, B̄(x))`.
    pub lower: f64,
    /// `|upper − lower| / (1 + |objective|)`.
    pub gap: f64,
    pub iterations: usize,
}

/// Damped best-response iteration between the decision maker and Nature.
/// Only the mean, cost, target and reference of `base` are used; its `std`
/// is ignored because the expansion set replaces it. No convergence
/// guarantee is known, so failure is reported as [`ExpansionError::MaxIterations`].
pub fn solve_expansion(
    espec: &ExpansionSpec,
    base: &ProblemSpec,
    options: &ExpansionOptions,
) -> Result<ExpansionSolution, ExpansionError> {
    espec.validate()?;
    let n1 = espec.n() + 1;
    if base.n() != n1 {
        return Err(ExpansionError::Dimension(format!(
            "base problem has {} agents, expected {n1}",
            base.n()
        )));
    }
    let model = model::aggregate(base)?;
    let rhs = model.rhs();
    let system = |b: &DMatrix<f64>| &model.m + b + &model.cost;

    let mut x = match &espec.x_bar {
        Some(x) => x.clone(),
        None => linalg::solve_spd(&system(&DMatrix::zeros(n1, n1)), &rhs)?.x,
    };
    let mut last_step = f64::INFINITY;
    for iteration in 1..=options.max_iterations {
        let wc = expansion_worst_case_at(espec, &x)?;
        let br = linalg::solve_spd(&system(&wc.aggregate), &rhs)?.x;
        let step = (&br - &x).norm();
        last_step = step;
        if step <= options.tol * (1.0 + x.norm()) {
            let wc = expansion_worst_case_at(espec, &br)?;
            let objective = objective_with_model(&model, base, &br, &wc.aggregate);
            let upper = objective;
            let best = linalg::solve_spd(&system(&wc.aggregate), &rhs)?.x;
            let lower = objective_with_model(&model, base, &best, &wc.aggregate);
            return Ok(ExpansionSolution {
                gap: (upper - lower).abs() / (1.0 + objective.abs()),
                x: br,
                worst_case: wc,
                objective,
                upper,
                lower,
                iterations: iteration,
            });
        }
        x = &x + (&br - &x) * options.damping;
    }
    Err(ExpansionError::MaxIterations {
        iterations: options.max_iterations,
        last_step,
    })
}
