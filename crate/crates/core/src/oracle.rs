//! Brute-force grid references for small instances.
//!
//! Every free covariance `(Bᵢ)_{jk}` is swept over an evenly spaced grid on
//! `[−v_ij v_ik, v_ij v_ik]`; candidates that are not PSD are dropped. Nothing
//! here uses the rank-1 structure of the analytic solution.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::higher_order::{ho_weights, HigherOrderSpec};
use crate::linalg;
use crate::model::{self, ProblemSpec};

pub const MAX_N: usize = 3;
/// Upper bound on the number of grid combinations one call may evaluate.
pub const MAX_COMBINATIONS: u128 = 50_000_000;
/// PSD filter: keep candidates with min eigenvalue ≥ −PSD_RTOL·trace.
const PSD_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("oracle supports n <= {max} agents (got {n})")]
    TooLarge { n: usize, max: usize },
    #[error("grid needs {combinations} evaluations, more than the limit of {max}")]
    Budget { combinations: u128, max: u128 },
    #[error("grid needs at least 3 points per axis (got {0})")]
    GridTooSmall(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub points_per_axis: usize,
}

impl GridSpec {
    pub fn new(points_per_axis: usize) -> Result<Self, OracleError> {
        if points_per_axis < 3 {
            return Err(OracleError::GridTooSmall(points_per_axis));
        }
        Ok(Self { points_per_axis })
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points_per_axis: 201,
        }
    }
}

/// `k` points from `−b` to `b`, endpoints exact, symmetric about 0.
pub fn linspace(b: f64, k: usize) -> Vec<f64> {
    let last = (k - 1) as f64;
    (0..k)
        .map(|i| {
            if i == 0 {
                -b
            } else if i == k - 1 {
                b
            } else if 2 * i == k - 1 {
                0.0
            } else {
                -b + 2.0 * b * (i as f64) / last
            }
        })
        .collect()
}

fn min_eigenvalue_small(a: &DMatrix<f64>) -> f64 {
    match a.nrows() {
        0 => 0.0,
        1 => a[(0, 0)],
        2 => {
            let m = 0.5 * (a[(0, 0)] + a[(1, 1)]);
            let d = 0.5 * (a[(0, 0)] - a[(1, 1)]);
            m - (d * d + a[(0, 1)] * a[(0, 1)]).sqrt()
        }
        3 => {
            let p1 = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
            if p1 == 0.0 {
                return a[(0, 0)].min(a[(1, 1)]).min(a[(2, 2)]);
            }
            let q = a.trace() / 3.0;
            let p2 = (a[(0, 0)] - q).powi(2)
                + (a[(1, 1)] - q).powi(2)
                + (a[(2, 2)] - q).powi(2)
                + 2.0 * p1;
            let p = (p2 / 6.0).sqrt();
            let b = (a - DMatrix::identity(3, 3) * q) / p;
            let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
            let phi = r.acos() / 3.0;
            q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos()
        }
        _ => linalg::min_eigenvalue(a),
    }
}

/// All PSD grid completions of one agent's covariance block.
struct AgentGrid {
    candidates: Vec<DMatrix<f64>>,
    /// Number of free off-diagonal entries actually swept.
    free: usize,
}

fn agent_grid(std_row: &[f64], k: usize) -> AgentGrid {
    let n = std_row.len();
    let mut pairs = Vec::new();
    for j in 0..n {
        for l in (j + 1)..n {
            let bound = std_row[j] * std_row[l];
            if bound > 0.0 {
                pairs.push((j, l, linspace(bound, k)));
            }
        }
    }
    let mut base = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        base[(j, j)] = std_row[j] * std_row[j];
    }
    let tol = PSD_RTOL * base.trace();
    let mut candidates = Vec::new();
    let mut idx = vec![0usize; pairs.len()];
    loop {
        let mut b = base.clone();
        for (p, &(j, l, ref values)) in pairs.iter().enumerate() {
            b[(j, l)] = values[idx[p]];
            b[(l, j)] = values[idx[p]];
        }
        if min_eigenvalue_small(&b) >= -tol {
            candidates.push(b);
        }
        // mixed-radix increment, last axis fastest
        let mut pos = pairs.len();
        loop {
            if pos == 0 {
                return AgentGrid {
                    candidates,
                    free: pairs.len(),
                };
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < k {
                break;
            }
            idx[pos] = 0;
        }
    }
}

fn agent_grid_size(std_row: &[f64], k: usize) -> u128 {
    let n = std_row.len();
    let mut free = 0u32;
    for j in 0..n {
        for l in (j + 1)..n {
            if std_row[j] * std_row[l] > 0.0 {
                free += 1;
            }
        }
    }
    (k as u128).pow(free)
}

fn std_rows(std: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..std.nrows())
        .map(|i| std.row(i).iter().copied().collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleInner {
    pub value: f64,
    pub blocks: Vec<DMatrix<f64>>,
}

/// Exhaustive grid maximum of `Σᵢ⟨x, Bᵢx⟩`.
pub fn oracle_inner_max(
    x: &DVector<f64>,
    spec: &ProblemSpec,
    grid: &GridSpec,
) -> Result<OracleInner, OracleError> {
    let n = spec.n();
    if n > MAX_N {
        return Err(OracleError::TooLarge { n, max: MAX_N });
    }
    if x.len() != n {
        return Err(OracleError::Dimension(format!(
            "x has {} entries, expected {n}",
            x.len()
        )));
    }
    let rows = std_rows(&spec.std);
    let total: u128 = rows
        .iter()
        .map(|r| agent_grid_size(r, grid.points_per_axis))
        .sum();
    if total > MAX_COMBINATIONS {
        return Err(OracleError::Budget {
            combinations: total,
            max: MAX_COMBINATIONS,
        });
    }
    let mut value = 0.0;
    let mut blocks = Vec::with_capacity(n);
    for row in &rows {
        let g = agent_grid(row, grid.points_per_axis);
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        for (c, b) in g.candidates.iter().enumerate() {
            let v = linalg::quad_form(b, x);
            if v > best {
                best = v;
                arg = c;
            }
        }
        value += best;
        blocks.push(g.candidates[arg].clone());
    }
    Ok(OracleInner { value, blocks })
}

/// `g(x, B) = xᵀQx − 2rᵀx + k + Σᵢ wᵢ⟨x, Bᵢx⟩`; reported values are `scale·g`.
struct Game {
    q: DMatrix<f64>,
    r: DVector<f64>,
    k: f64,
    weights: Vec<f64>,
    std: DMatrix<f64>,
    scale: f64,
}

impl Game {
    fn from_problem(spec: &ProblemSpec) -> Self {
        let model = model::aggregate_unchecked(spec);
        let k = spec.target.dot(&spec.target) + linalg::quad_form(&model.cost, &spec.reference);
        Self {
            q: &model.m + &model.cost,
            r: model.rhs(),
            k,
            weights: vec![1.0; spec.n()],
            std: spec.std.clone(),
            scale: 0.5,
        }
    }

    fn from_higher_order(hspec: &HigherOrderSpec) -> Self {
        let n = hspec.n();
        let z = &hspec.base.target;
        Self {
            q: DMatrix::identity(n, n),
            r: z.clone(),
            k: z.dot(z),
            weights: ho_weights(hspec).kappa,
            std: hspec.base.std.clone(),
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSaddle {
    /// Primal minimizer among the grid best responses.
    pub x: DVector<f64>,
    /// Dual maximizer: one block per agent.
    pub blocks: Vec<DMatrix<f64>>,
    /// `min_x max_B` over the grid.
    pub primal_value: f64,
    /// `max_B min_x` over the grid.
    pub dual_value: f64,
    /// `primal − dual`, ≥ 0 up to roundoff.
    pub gap: f64,
}

impl OracleSaddle {
    pub fn value(&self) -> f64 {
        self.primal_value
    }
}

/// Both orderings of the min–max problem on the covariance grid.
pub fn oracle_saddle(spec: &ProblemSpec, grid: &GridSpec) -> Result<OracleSaddle, OracleError> {
    saddle(&Game::from_problem(spec), grid)
}

/// Same for the zero-mean second-order objective.
pub fn oracle_saddle_higher_order(
    hspec: &HigherOrderSpec,
    grid: &GridSpec,
) -> Result<OracleSaddle, OracleError> {
    saddle(&Game::from_higher_order(hspec), grid)
}

fn saddle(game: &Game, grid: &GridSpec) -> Result<OracleSaddle, OracleError> {
    let n = game.std.nrows();
    if n > MAX_N {
        return Err(OracleError::TooLarge { n, max: MAX_N });
    }
    let k = grid.points_per_axis;
    let rows = std_rows(&game.std);
    let product: u128 = rows.iter().map(|r| agent_grid_size(r, k)).product();
    if product > MAX_COMBINATIONS {
        return Err(OracleError::Budget {
            combinations: product,
            max: MAX_COMBINATIONS,
        });
    }
    let grids: Vec<AgentGrid> = rows.iter().map(|r| agent_grid(r, k)).collect();

    // dual: every combination of per-agent candidates
    let mut idx = vec![0usize; n];
    let mut dual_value = f64::NEG_INFINITY;
    let mut dual_arg = idx.clone();
    let mut responses: Vec<DVector<f64>> = Vec::new();
    'outer: loop {
        let mut sys = game.q.clone();
        for (i, g) in grids.iter().enumerate() {
            sys += &g.candidates[idx[i]] * game.weights[i];
        }
        if let Ok(sol) = linalg::solve_spd(&sys, &game.r) {
            // min_x g(x, B) = k − rᵀx_BR
            let v = game.k - game.r.dot(&sol.x);
            if v > dual_value {
                dual_value = v;
                dual_arg = idx.clone();
            }
            responses.push(sol.x);
        }
        let mut pos = n;
        loop {
            if pos == 0 {
                break 'outer;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < grids[pos].candidates.len() {
                break;
            }
            idx[pos] = 0;
        }
    }

    // primal: grid inner maximum at every best response. With a single free
    // entry the block value is affine in it, so the extremes of the grid suffice.
    let extremes: Vec<Vec<&DMatrix<f64>>> = grids
        .iter()
        .map(|g| {
            if g.free == 1 && g.candidates.len() > 2 {
                vec![&g.candidates[0], &g.candidates[g.candidates.len() - 1]]
            } else {
                g.candidates.iter().collect()
            }
        })
        .collect();
    let mut primal_value = f64::INFINITY;
    let mut primal_x = DVector::zeros(n);
    for x in &responses {
        let mut v = linalg::quad_form(&game.q, x) - 2.0 * game.r.dot(x) + game.k;
        for (i, cands) in extremes.iter().enumerate() {
            let best = cands
                .iter()
                .map(|b| linalg::quad_form(b, x))
                .fold(f64::NEG_INFINITY, f64::max);
            v += game.weights[i] * best;
        }
        if v < primal_value {
            primal_value = v;
            primal_x = x.clone();
        }
    }
    let blocks = grids
        .iter()
        .zip(&dual_arg)
        .map(|(g, &c)| g.candidates[c].clone())
        .collect();
    Ok(OracleSaddle {
        x: primal_x,
        blocks,
        primal_value: game.scale * primal_value,
        dual_value: game.scale * dual_value,
        gap: game.scale * (primal_value - dual_value),
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
    fn grid_is_symmetric_with_endpoints() {
        let g = linspace(6.0, 201);
        assert_eq!(g[0], -6.0);
        assert_eq!(g[200], 6.0);
        assert_eq!(g[100], 0.0);
        for i in 0..201 {
            assert!((g[i] + g[200 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn inner_oracle_matches_closed_form() {
        let spec = spec_with_std(&[2.0, 3.0, 1.0, 1.0]);
        let r = oracle_inner_max(
            &DVector::from_vec(vec![1.0, -1.0]),
            &spec,
            &GridSpec::default(),
        )
        .unwrap();
        assert!((r.value - 29.0).abs() < 1e-12);
        assert_eq!(r.blocks[0][(0, 1)], -6.0);
        assert_eq!(r.blocks[1][(0, 1)], -1.0);
    }

    #[test]
    fn inner_oracle_zero_x() {
        let spec = spec_with_std(&[2.0, 3.0, 1.0, 1.0]);
        assert_eq!(
            oracle_inner_max(&DVector::zeros(2), &spec, &GridSpec::default())
                .unwrap()
                .value,
            0.0
        );
    }

    #[test]
    fn single_agent_has_no_free_entries() {
        let spec = ProblemSpec::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            Cost::scaled_identity(1.0),
            DVector::from_element(1, 1.0),
            DVector::zeros(1),
        );
        let r =
            oracle_inner_max(&DVector::from_element(1, 2.0), &spec, &GridSpec::default()).unwrap();
        assert_eq!(r.value, 4.0);
        let s = oracle_saddle(&spec, &GridSpec::default()).unwrap();
        assert!((s.primal_value - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.dual_value - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn three_by_three_min_eigenvalue() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, -0.4, 0.3, 1.0, 0.5, -0.4, 0.5, 1.5]);
        assert!((min_eigenvalue_small(&a) - linalg::min_eigenvalue(&a)).abs() < 1e-12);
    }

    #[test]
    fn too_many_agents() {
        let spec = ProblemSpec::new(
            DMatrix::identity(4, 4),
            DMatrix::from_element(4, 4, 1.0),
            Cost::scaled_identity(1.0),
            DVector::from_element(4, 1.0),
            DVector::zeros(4),
        );
        assert!(matches!(
            oracle_saddle(&spec, &GridSpec::default()),
            Err(OracleError::TooLarge { n: 4, max: 3 })
        ));
        assert!(GridSpec::new(2).is_err());
    }

    #[test]
    fn weak_duality_on_the_grid() {
        let s = oracle_saddle(
            &crate::model::two_agent_family(2.0, 0.5, 2.0),
            &GridSpec::new(21).unwrap(),
        )
        .unwrap();
        assert!(s.gap >= -1e-12);
    }
}
