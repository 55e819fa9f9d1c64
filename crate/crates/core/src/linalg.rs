//! Small dense linear-algebra helpers shared by the solver modules.
//!
//! Matrices are `nalgebra::DMatrix<f64>`. Problem sizes are desk-scale, so
//! everything here is dense and sequential; all reductions run in a fixed
//! index order so results are bit-reproducible.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Pivots below this fraction of the largest diagonal entry are treated as
/// a failed positive-definite factorization.
const PIVOT_RTOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: matrix is {n}x{n}, right-hand side has {len} entries")]
    Dimension { n: usize, len: usize },
    #[error("system is not positive definite: pivot {pivot:e} at index {index} (smallest pivot seen {smallest_pivot:e})")]
    NotPositiveDefinite {
        index: usize,
        pivot: f64,
        smallest_pivot: f64,
    },
    #[error("system is singular (smallest Cholesky pivot {smallest_pivot:e}); LU fallback failed")]
    Singular { smallest_pivot: f64 },
}

/// Lower-triangular Cholesky factor `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
    smallest_pivot: f64,
}

impl Cholesky {
    pub fn factor(a: &DMatrix<f64>) -> Result<Self, LinalgError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(LinalgError::NotSquare {
                rows: n,
                cols: a.ncols(),
            });
        }
        let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
        let mut l = DMatrix::<f64>::zeros(n, n);
        let mut smallest_pivot = f64::INFINITY;
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            smallest_pivot = smallest_pivot.min(d);
            if !d.is_finite() || d <= PIVOT_RTOL * scale || d <= 0.0 {
                return Err(LinalgError::NotPositiveDefinite {
                    index: j,
                    pivot: d,
                    smallest_pivot,
                });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l, smallest_pivot })
    }

    pub fn smallest_pivot(&self) -> f64 {
        self.smallest_pivot
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.l.nrows();
        let mut y = b.clone();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[(i, k)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        y
    }
}

/// Which factorization produced a [`LinearSolve`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    Cholesky,
    PivotedLu,
}

#[derive(Debug, Clone)]
pub struct LinearSolve {
    pub x: DVector<f64>,
    pub method: SolveMethod,
    /// Smallest Cholesky pivot encountered (also reported when the
    /// factorization failed and LU took over).
    pub smallest_pivot: f64,
}

/// Solves a symmetric positive-definite system, falling back to partially
/// pivoted LU when the Cholesky factorization breaks down.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<LinearSolve, LinalgError> {
    let n = a.nrows();
    if b.len() != n {
        return Err(LinalgError::Dimension { n, len: b.len() });
    }
    match Cholesky::factor(a) {
        Ok(ch) => Ok(LinearSolve {
            x: ch.solve(b),
            method: SolveMethod::Cholesky,
            smallest_pivot: ch.smallest_pivot(),
        }),
        Err(LinalgError::NotPositiveDefinite { smallest_pivot, .. }) => {
            let x = a.clone().lu().solve(b);
            match x {
                Some(x) if x.iter().all(|v| v.is_finite()) => Ok(LinearSolve {
                    x,
                    method: SolveMethod::PivotedLu,
                    smallest_pivot,
                }),
                _ => Err(LinalgError::Singular { smallest_pivot }),
            }
        }
        Err(e) => Err(e),
    }
}

pub fn outer(a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
}

/// `⟨x, A x⟩` accumulated row by row.
pub fn quad_form(a: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let n = x.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += a[(i, j)] * x[j];
        }
        total += x[i] * row;
    }
    total
}

/// Frobenius inner product `trace(Aᵀ B)`.
pub fn frobenius_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Symmetry check relative to the largest entry.
pub fn is_symmetric(a: &DMatrix<f64>, rtol: f64) -> bool {
    if a.nrows() != a.ncols() {
        return false;
    }
    let scale = max_abs(a).max(f64::MIN_POSITIVE);
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > rtol * scale {
                return false;
            }
        }
    }
    true
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(a)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(a).first().copied().unwrap_or(0.0)
}

/// Eigenpairs of a symmetric matrix, sorted by descending eigenvalue.
pub fn sym_eigen_desc(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = symmetrize(a).symmetric_eigen();
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Singular values, descending.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = a
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Nearest positive-semidefinite matrix in Frobenius norm (eigenvalue clipping).
pub fn project_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(a).symmetric_eigen();
    let n = a.nrows();
    let mut out = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        let lam = eig.eigenvalues[k];
        if lam <= 0.0 {
            continue;
        }
        let u = eig.eigenvectors.column(k);
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] += lam * u[i] * u[j];
            }
        }
    }
    symmetrize(&out)
}

/// Relative PSD test: smallest eigenvalue ≥ −rtol·scale.
pub fn is_psd(a: &DMatrix<f64>, rtol: f64) -> bool {
    let ev = sym_eigenvalues(a);
    let scale = ev.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    ev.first()
        .is_none_or(|&lo| lo >= -rtol * scale.max(f64::MIN_POSITIVE))
}

pub fn norm_inf(x: &DVector<f64>) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_matches_direct_solve() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let sol = solve_spd(&a, &b).unwrap();
        assert_eq!(sol.method, SolveMethod::Cholesky);
        let r = &a * &sol.x - &b;
        assert!(r.norm() < 1e-14);
    }

    #[test]
    fn cholesky_reports_failing_pivot() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match Cholesky::factor(&a) {
            Err(LinalgError::NotPositiveDefinite { index, pivot, .. }) => {
                assert_eq!(index, 1);
                assert_eq!(pivot, -3.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn indefinite_system_falls_back_to_lu() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let b = DVector::from_vec(vec![3.0, 3.0]);
        let sol = solve_spd(&a, &b).unwrap();
        assert_eq!(sol.method, SolveMethod::PivotedLu);
        assert!((sol.x[0] - 1.0).abs() < 1e-14 && (sol.x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn singular_system_is_an_error() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 0.0]);
        assert!(matches!(
            solve_spd(&a, &b),
            Err(LinalgError::Singular { .. })
        ));
    }

    #[test]
    fn psd_projection_clips_negative_eigenvalues() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let p = project_psd(&a);
        // eigenpairs (3, (1,1)/√2) and (−1, (1,−1)/√2)
        assert!((p[(0, 0)] - 1.5).abs() < 1e-14);
        assert!((p[(0, 1)] - 1.5).abs() < 1e-14);
        assert!(min_eigenvalue(&p) > -1e-14);
    }
}
