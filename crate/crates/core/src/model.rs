//! Problem data, validation and the aggregated quantities the solver consumes.
//!
//! A problem is described by the first two moments of a random influence
//! matrix `G` (entry `(i, j)` is the effect of agent `j`'s allocation on agent
//! `i`'s outcome), a PSD deviation-cost matrix `C`, a target outcome `z` and a
//! reference allocation `x⁰`. Expanding `½E‖Gx − z‖² + ½‖C^{½}(x − x⁰)‖²`
//! splits the objective into a mean part `M = Σᵢ mᵢ⊗mᵢ`, a linear part
//! `ψ⁰ + ψ` and an uncertainty part `⟨x, Bx⟩` that Nature controls.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

/// Relative smallest/largest singular-value threshold for full rank of `M`.
pub const TOL_RANK: f64 = 1e-9;
/// Relative symmetry tolerance for the cost matrix.
pub const COST_SYMMETRY_RTOL: f64 = 1e-12;
/// Cost eigenvalues must be ≥ −COST_PSD_RTOL·‖C‖.
pub const COST_PSD_RTOL: f64 = 1e-10;

/// Deviation-cost matrix `C`, kept in the form it was specified in.
#[derive(Debug, Clone, PartialEq)]
pub enum Cost {
    /// `c·I`
    ScaledIdentity {
        c: f64,
    },
    /// `c·(p⊗p)`
    Rank1 {
        c: f64,
        p: DVector<f64>,
    },
    Dense(DMatrix<f64>),
}

impl Cost {
    pub fn scaled_identity(c: f64) -> Self {
        Cost::ScaledIdentity { c }
    }

    pub fn rank1(c: f64, p: DVector<f64>) -> Self {
        Cost::Rank1 { c, p }
    }

    pub fn dense(matrix: DMatrix<f64>) -> Self {
        Cost::Dense(matrix)
    }

    pub fn matrix(&self, n: usize) -> DMatrix<f64> {
        match self {
            Cost::ScaledIdentity { c } => DMatrix::identity(n, n) * *c,
            Cost::Rank1 { c, p } => linalg::outer(p, p) * *c,
            Cost::Dense(m) => m.clone(),
        }
    }

    /// Side length implied by the representation, if it carries one.
    fn dimension(&self) -> Option<(usize, usize)> {
        match self {
            Cost::ScaledIdentity { .. } => None,
            Cost::Rank1 { p, .. } => Some((p.len(), p.len())),
            Cost::Dense(m) => Some((m.nrows(), m.ncols())),
        }
    }

    /// Multiplies the cost by a nonnegative factor, keeping its form.
    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            Cost::ScaledIdentity { c } => Cost::ScaledIdentity { c: c * factor },
            Cost::Rank1 { c, p } => Cost::Rank1 {
                c: c * factor,
                p: p.clone(),
            },
            Cost::Dense(m) => Cost::Dense(m * factor),
        }
    }
}

/// User-facing description of a robust intervention problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    /// `mean[(i, j)] = E[G_ij]`.
    pub mean: DMatrix<f64>,
    /// `std[(i, j)]` is the standard deviation of `G_ij`.
    pub std: DMatrix<f64>,
    pub cost: Cost,
    pub target: DVector<f64>,
    pub reference: DVector<f64>,
}

impl ProblemSpec {
    pub fn new(
        mean: DMatrix<f64>,
        std: DMatrix<f64>,
        cost: Cost,
        target: DVector<f64>,
        reference: DVector<f64>,
    ) -> Self {
        Self {
            mean,
            std,
            cost,
            target,
            reference,
        }
    }

    /// Number of agents.
    pub fn n(&self) -> usize {
        self.mean.nrows()
    }

    pub fn cost_matrix(&self) -> DMatrix<f64> {
        self.cost.matrix(self.n())
    }

    /// Copy with every standard deviation multiplied by `t`.
    pub fn with_std_scaled(&self, t: f64) -> Self {
        let mut out = self.clone();
        out.std *= t;
        out
    }

    /// Copy with the agents relabelled: new agent `k` is old agent `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n();
        let pm = |m: &DMatrix<f64>| DMatrix::from_fn(n, n, |i, j| m[(perm[i], perm[j])]);
        let pv = |v: &DVector<f64>| DVector::from_fn(n, |i, _| v[perm[i]]);
        let cost = match &self.cost {
            Cost::ScaledIdentity { c } => Cost::ScaledIdentity { c: *c },
            Cost::Rank1 { c, p } => Cost::Rank1 { c: *c, p: pv(p) },
            Cost::Dense(m) => Cost::Dense(pm(m)),
        };
        Self {
            mean: pm(&self.mean),
            std: pm(&self.std),
            cost,
            target: pv(&self.target),
            reference: pv(&self.reference),
        }
    }
}

/// A single broken invariant found by [`validate_spec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    EmptyProblem,
    DimensionMismatch {
        field: String,
        expected: String,
        found: String,
    },
    NonFiniteValue {
        field: String,
    },
    /// A standard deviation is exactly zero. The solver still accepts these
    /// (a zero-variance link is simply certain); the problem file does not.
    ZeroStd {
        i: usize,
        j: usize,
    },
    NegativeStd {
        i: usize,
        j: usize,
        value: f64,
    },
    CostNotSymmetric {
        max_asymmetry: f64,
    },
    CostNotPsd {
        min_eigenvalue: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyProblem => write!(f, "problem has no agents"),
            Violation::DimensionMismatch {
                field,
                expected,
                found,
            } => {
                write!(
                    f,
                    "dimension mismatch in {field}: expected {expected}, found {found}"
                )
            }
            Violation::NonFiniteValue { field } => write!(f, "{field} contains a non-finite value"),
            Violation::ZeroStd { i, j } => {
                write!(f, "std must be strictly positive (entry ({i}, {j}) is 0)")
            }
            Violation::NegativeStd { i, j, value } => {
                write!(
                    f,
                    "std must be strictly positive (entry ({i}, {j}) is {value})"
                )
            }
            Violation::CostNotSymmetric { max_asymmetry } => {
                write!(
                    f,
                    "cost not symmetric (max |C_ij - C_ji| = {max_asymmetry:e})"
                )
            }
            Violation::CostNotPsd { min_eigenvalue } => {
                write!(
                    f,
                    "cost not positive semi-definite (min eigenvalue {min_eigenvalue:e})"
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    /// All invariants hold.
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    /// Nothing but exact-zero standard deviations, which the solvers accept.
    pub fn solvable(&self) -> bool {
        self.violations
            .iter()
            .all(|v| matches!(v, Violation::ZeroStd { .. }))
    }

    pub fn messages(&self) -> Vec<String> {
        self.violations.iter().map(|v| v.to_string()).collect()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ok() {
            return write!(f, "ok");
        }
        write!(f, "{}", self.messages().join("; "))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid problem: {0}")]
    Invalid(ValidationReport),
}

fn shape(m: &DMatrix<f64>) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

/// Checks every invariant of a [`ProblemSpec`] and lists what is broken.
pub fn validate_spec(spec: &ProblemSpec) -> ValidationReport {
    let mut violations = Vec::new();
    let n = spec.mean.nrows();
    if n == 0 {
        violations.push(Violation::EmptyProblem);
        return ValidationReport { violations };
    }
    let square = format!("{n}x{n}");
    let mut dims_ok = true;
    let mut check_mat = |field: &str, m: &DMatrix<f64>, violations: &mut Vec<Violation>| {
        if m.nrows() != n || m.ncols() != n {
            dims_ok = false;
            violations.push(Violation::DimensionMismatch {
                field: field.into(),
                expected: square.clone(),
                found: shape(m),
            });
        }
    };
    check_mat("mean", &spec.mean, &mut violations);
    check_mat("std", &spec.std, &mut violations);
    if let Some((r, c)) = spec.cost.dimension() {
        if r != n || c != n {
            dims_ok = false;
            violations.push(Violation::DimensionMismatch {
                field: "cost".into(),
                expected: square.clone(),
                found: format!("{r}x{c}"),
            });
        }
    }
    for (field, v) in [("target", &spec.target), ("reference", &spec.reference)] {
        if v.len() != n {
            dims_ok = false;
            violations.push(Violation::DimensionMismatch {
                field: field.into(),
                expected: n.to_string(),
                found: v.len().to_string(),
            });
        }
    }

    let cost_values: Vec<f64> = match &spec.cost {
        Cost::ScaledIdentity { c } => vec![*c],
        Cost::Rank1 { c, p } => std::iter::once(*c).chain(p.iter().copied()).collect(),
        Cost::Dense(m) => m.iter().copied().collect(),
    };
    let finite_fields: [(&str, Box<dyn Iterator<Item = f64> + '_>); 5] = [
        ("mean", Box::new(spec.mean.iter().copied())),
        ("std", Box::new(spec.std.iter().copied())),
        ("cost", Box::new(cost_values.into_iter())),
        ("target", Box::new(spec.target.iter().copied())),
        ("reference", Box::new(spec.reference.iter().copied())),
    ];
    let mut finite = true;
    for (field, mut values) in finite_fields {
        if !values.all(f64::is_finite) {
            finite = false;
            violations.push(Violation::NonFiniteValue {
                field: field.into(),
            });
        }
    }

    for i in 0..spec.std.nrows() {
        for j in 0..spec.std.ncols() {
            let v = spec.std[(i, j)];
            if v == 0.0 {
                violations.push(Violation::ZeroStd { i, j });
            } else if v < 0.0 {
                violations.push(Violation::NegativeStd { i, j, value: v });
            }
        }
    }

    if dims_ok && finite {
        let c = spec.cost_matrix();
        let scale = linalg::max_abs(&c);
        let mut asym = 0.0_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                asym = asym.max((c[(i, j)] - c[(j, i)]).abs());
            }
        }
        if asym > COST_SYMMETRY_RTOL * scale.max(f64::MIN_POSITIVE) {
            violations.push(Violation::CostNotSymmetric {
                max_asymmetry: asym,
            });
        } else {
            let ev = linalg::sym_eigenvalues(&c);
            let norm = ev.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let lo = ev[0];
            if lo < -COST_PSD_RTOL * norm {
                violations.push(Violation::CostNotPsd { min_eigenvalue: lo });
            }
        }
    }

    ValidationReport { violations }
}

/// Validates with the solver's relaxed rule (zero standard deviations allowed).
pub fn ensure_solvable(spec: &ProblemSpec) -> Result<(), ModelError> {
    let report = validate_spec(spec);
    if report.solvable() {
        Ok(())
    } else {
        Err(ModelError::Invalid(report))
    }
}

/// Full-rank report for the aggregated mean influence `M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyAReport {
    pub full_rank: bool,
    pub smallest_singular_value: f64,
    pub largest_singular_value: f64,
    /// Absolute threshold actually applied: `TOL_RANK · largest`.
    pub threshold: f64,
}

/// Derived quantities of a problem.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedModel {
    /// `M = Σᵢ mᵢ⊗mᵢ`, `mᵢ` the i-th row of the mean matrix.
    pub m: DMatrix<f64>,
    /// `ψ = Σᵢ zᵢ mᵢ`.
    pub psi: DVector<f64>,
    /// `ψ⁰ = C x⁰`.
    pub psi0: DVector<f64>,
    /// `σᵢ² = Σⱼ v_ij²`, the total variance of the links into agent i.
    pub sigma_sq: DVector<f64>,
    pub cost: DMatrix<f64>,
    pub property_a: PropertyAReport,
}

impl AggregatedModel {
    /// `ψ⁰ + ψ`, the right-hand side of the stationarity system.
    pub fn rhs(&self) -> DVector<f64> {
        &self.psi0 + &self.psi
    }
}

/// Computes `M`, `ψ`, `ψ⁰` and `σ²`, summing over agents in index order.
pub fn aggregate(spec: &ProblemSpec) -> Result<AggregatedModel, ModelError> {
    ensure_solvable(spec)?;
    Ok(aggregate_unchecked(spec))
}

pub(crate) fn aggregate_unchecked(spec: &ProblemSpec) -> AggregatedModel {
    let n = spec.n();
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut psi = DVector::<f64>::zeros(n);
    for i in 0..n {
        let zi = spec.target[i];
        for j in 0..n {
            let mij = spec.mean[(i, j)];
            psi[j] += zi * mij;
            for k in 0..n {
                m[(j, k)] += mij * spec.mean[(i, k)];
            }
        }
    }
    let cost = spec.cost_matrix();
    let psi0 = &cost * &spec.reference;
    let sigma_sq = DVector::from_fn(n, |i, _| {
        let mut s = 0.0;
        for j in 0..n {
            s += spec.std[(i, j)] * spec.std[(i, j)];
        }
        s
    });
    let property_a = check_property_a_matrix(&m);
    AggregatedModel {
        m,
        psi,
        psi0,
        sigma_sq,
        cost,
        property_a,
    }
}

/// Full-rank (independent responsiveness) test of `M`.
pub fn check_property_a(model: &AggregatedModel) -> PropertyAReport {
    check_property_a_matrix(&model.m)
}

fn check_property_a_matrix(m: &DMatrix<f64>) -> PropertyAReport {
    let sv = linalg::singular_values(m);
    let largest = sv.first().copied().unwrap_or(0.0);
    let smallest = sv.last().copied().unwrap_or(0.0);
    let threshold = TOL_RANK * largest;
    PropertyAReport {
        full_rank: largest > 0.0 && smallest > threshold,
        smallest_singular_value: smallest,
        largest_singular_value: largest,
        threshold,
    }
}

/// Strict sign vector with entries in {+1, −1}.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<i8>", into = "Vec<i8>")]
pub struct SignPattern(Vec<i8>);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("sign entries must be +1 or -1 (found {value} at index {index})")]
pub struct InvalidSign {
    pub index: usize,
    pub value: i8,
}

impl SignPattern {
    pub fn new(signs: Vec<i8>) -> Result<Self, InvalidSign> {
        if let Some((index, &value)) = signs.iter().enumerate().find(|(_, &s)| s != 1 && s != -1) {
            return Err(InvalidSign { index, value });
        }
        Ok(Self(signs))
    }

    pub fn all_positive(n: usize) -> Self {
        Self(vec![1; n])
    }

    /// Signs of `x`; zero entries map to +1.
    pub fn of(x: &DVector<f64>) -> Self {
        Self(x.iter().map(|&v| if v < 0.0 { -1 } else { 1 }).collect())
    }

    /// Orthant number `index` in lexicographic order with −1 before +1:
    /// bit `n−1−k` of `index` set means entry k is +1.
    pub fn from_index(n: usize, index: u64) -> Self {
        Self(
            (0..n)
                .map(|k| {
                    if (index >> (n - 1 - k)) & 1 == 1 {
                        1
                    } else {
                        -1
                    }
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    pub fn get(&self, k: usize) -> f64 {
        f64::from(self.0[k])
    }

    pub fn negated(&self) -> Self {
        Self(self.0.iter().map(|s| -s).collect())
    }
}

impl TryFrom<Vec<i8>> for SignPattern {
    type Error = InvalidSign;
    fn try_from(v: Vec<i8>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<SignPattern> for Vec<i8> {
    fn from(s: SignPattern) -> Self {
        s.0
    }
}

impl fmt::Display for SignPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.0 {
            f.write_str(if *s > 0 { "+" } else { "-" })?;
        }
        Ok(())
    }
}

/// The two-agent family `m₁₁ = m₂₁ = m`, `m₁₂ = m₂₂ = 1`, `v₁₁ = v₂₁ = v`,
/// `v₁₂ = v₂₂ = 1`, `z = (1, 1)`, `x⁰ = 0`, `C = c·I`.
pub fn two_agent_family(m: f64, v: f64, c: f64) -> ProblemSpec {
    ProblemSpec::new(
        DMatrix::from_row_slice(2, 2, &[m, 1.0, m, 1.0]),
        DMatrix::from_row_slice(2, 2, &[v, 1.0, v, 1.0]),
        Cost::scaled_identity(c),
        DVector::from_element(2, 1.0),
        DVector::zeros(2),
    )
}
