//! Dense linear-algebra primitives for the average-dispersion machinery.
//!
//! A vector `chi` in R^N splits into its average along the all-ones direction
//! and a dispersion component in the orthogonal complement, via a matrix `S`
//! with `S^T 1 = 0` and `S^T S = I`. All routines here are pure functions on
//! immutable inputs and are sized for small dense problems (N up to a few
//! hundred), not for sparse or large-scale work.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension must be at least 2, got {0}")]
    InvalidDimension(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("matrix is not Schur (spectral radius {0})")]
    NotSchur(f64),
    #[error("matrix is not positive definite (eigenvalue {0})")]
    NotPositiveDefinite(f64),
    #[error("solver failed: {0}")]
    SolveFailed(String),
}

/// Orthonormal basis of the orthogonal complement of the all-ones vector.
///
/// The `N x (N-1)` matrix `S` satisfies `S^T 1 = 0`, `S^T S = I` and
/// `1 1^T / N + S S^T = I`. The basis is the deterministic one obtained from
/// the Householder reflector mapping `1/sqrt(N)` to the first canonical
/// vector; its columns 2..N form `S`.
#[derive(Debug, Clone)]
pub struct DispersionBasis {
    n: usize,
    s: DMatrix<f64>,
}

/// The pair `(avg, disp)` of a vector: `avg = 1^T chi / N`, `disp = S^T chi`.
#[derive(Debug, Clone, PartialEq)]
pub struct AvgDispPair {
    pub avg: f64,
    pub disp: DVector<f64>,
}

impl DispersionBasis {
    pub fn n(&self) -> usize {
        self.n
    }

    /// The `N x (N-1)` matrix `S`.
    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    /// Splits `chi` into average and dispersion components.
    pub fn decompose(&self, chi: &DVector<f64>) -> Result<AvgDispPair, LinalgError> {
        if chi.len() != self.n {
            return Err(LinalgError::DimensionMismatch {
                expected: self.n,
                got: chi.len(),
            });
        }
        let avg = chi.sum() / self.n as f64;
        let disp = self.s.tr_mul(chi);
        Ok(AvgDispPair { avg, disp })
    }

    /// Reassembles `1 * avg + S * disp`; inverse of [`Self::decompose`].
    pub fn recompose(&self, pair: &AvgDispPair) -> Result<DVector<f64>, LinalgError> {
        if pair.disp.len() != self.n - 1 {
            return Err(LinalgError::DimensionMismatch {
                expected: self.n - 1,
                got: pair.disp.len(),
            });
        }
        let mut chi = &self.s * &pair.disp;
        chi.add_scalar_mut(pair.avg);
        Ok(chi)
    }
}

/// Builds the deterministic dispersion basis for network size `n >= 2`.
pub fn build_dispersion_basis(n: usize) -> Result<DispersionBasis, LinalgError> {
    if n < 2 {
        return Err(LinalgError::InvalidDimension(n));
    }
    let nf = n as f64;
    // v = 1/sqrt(n) - e1; the reflector I - 2 v v^T / (v^T v) swaps the
    // normalized ones vector with e1.
    let mut v = DVector::from_element(n, 1.0 / nf.sqrt());
    v[0] -= 1.0;
    let scale = 2.0 / v.norm_squared();
    let mut h = DMatrix::identity(n, n);
    h.ger(-scale, &v, &v, 1.0);
    let s = h.columns(1, n - 1).into_owned();
    Ok(DispersionBasis { n, s })
}

fn require_square(m: &DMatrix<f64>) -> Result<usize, LinalgError> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(m.nrows())
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Eigenvalues of a symmetric matrix, sorted ascending.
///
/// The input must be symmetric up to an absolute entrywise tolerance of
/// `1e-10 * (1 + max |m_ij|)`; it is symmetrized before factoring. The
/// eigendecomposition is verified to reconstruct the matrix to
/// `1e-9 * |m|`.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Result<DVector<f64>, LinalgError> {
    let n = require_square(m)?;
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let scale = 1.0 + m.amax();
    let asym = max_asymmetry(m);
    if asym > 1e-10 * scale {
        return Err(LinalgError::NotSymmetric(asym));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    let recon =
        &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues) * eig.eigenvectors.transpose();
    let resid = (&recon - &sym).norm();
    if resid > 1e-9 * sym.norm().max(1.0) {
        return Err(LinalgError::SolveFailed(format!(
            "eigendecomposition residual {resid:.3e}"
        )));
    }
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).expect("eigenvalues are finite"));
    Ok(DVector::from_vec(vals))
}

/// Spectral radius of a square matrix (possibly complex spectrum).
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

/// Largest singular value (induced 2-norm).
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Solves the discrete Lyapunov equation `A^T P A - P = -Q` for `P = P^T > 0`.
///
/// `a` must be Schur (spectral radius strictly below 1) and `q` symmetric
/// positive definite. The solve vectorizes the linear system
/// `(I - A^T (x) A^T) vec(P) = vec(Q)` and factors it with LU; the result is
/// symmetrized and checked to satisfy the equation with residual at most
/// `1e-8 |Q|`.
pub fn solve_discrete_lyapunov(
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> Result<DMatrix<f64>, LinalgError> {
    let n = require_square(a)?;
    let nq = require_square(q)?;
    if n != nq {
        return Err(LinalgError::DimensionMismatch {
            expected: n,
            got: nq,
        });
    }
    let q_eigs = symmetric_eigenvalues(q)?;
    if q_eigs[0] <= 0.0 {
        return Err(LinalgError::NotPositiveDefinite(q_eigs[0]));
    }
    let rho = spectral_radius(a);
    if rho >= 1.0 {
        return Err(LinalgError::NotSchur(rho));
    }

    let at = a.transpose();
    let lhs = DMatrix::identity(n * n, n * n) - at.kronecker(&at);
    let rhs = DVector::from_column_slice(q.as_slice());
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| LinalgError::SolveFailed("singular Lyapunov system".into()))?;
    let p_raw = DMatrix::from_column_slice(n, n, sol.as_slice());
    let p = (&p_raw + p_raw.transpose()) * 0.5;

    let resid = operator_norm(&(&at * &p * a - &p + q));
    if resid > 1e-8 * operator_norm(q) {
        return Err(LinalgError::SolveFailed(format!(
            "Lyapunov residual {resid:.3e}"
        )));
    }
    let p_eigs = symmetric_eigenvalues(&p)?;
    if p_eigs[0] <= 0.0 {
        return Err(LinalgError::NotPositiveDefinite(p_eigs[0]));
    }
    Ok(p)
}
