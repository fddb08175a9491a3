//! Dense symmetric and positive semi-definite matrix algebra.
//!
//! Everything here works on small dense matrices (a few hundred rows at most)
//! stored as `nalgebra` matrices. Eigendecomposition is a cyclic Jacobi sweep,
//! which is slow asymptotically but accurate to machine precision and has no
//! failure modes beyond the iteration cap.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Relative tolerance used to accept a matrix as PSD.
pub const PSD_TOLERANCE: f64 = 1e-10;

const JACOBI_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("jacobi eigensolver did not converge after {rotations} rotations (off-diagonal norm {residual:e})")]
    NoConvergence { rotations: usize, residual: f64 },
    #[error("matrix is not positive definite: leading minor {minor} has non-positive pivot {pivot:e}")]
    NotPositiveDefinite { minor: usize, pivot: f64 },
    #[error("matrix is not positive semi-definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("matrix is zero")]
    ZeroMatrix,
}

/// A real symmetric matrix. Construction symmetrizes so that
/// `m[(i, j)] == m[(j, i)]` holds bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    data: DMatrix<f64>,
}

impl SymMatrix {
    /// Accepts a matrix whose asymmetry is within `1e-12` relative to its largest entry,
    /// then averages the two triangles.
    pub fn new(m: DMatrix<f64>) -> Result<Self, LinalgError> {
        if m.nrows() != m.ncols() {
            return Err(LinalgError::NotSquare { rows: m.nrows(), cols: m.ncols() });
        }
        let scale = m.amax().max(1.0);
        let mut asym: f64 = 0.0;
        for i in 0..m.nrows() {
            for j in 0..i {
                asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        if asym > 1e-12 * scale {
            return Err(LinalgError::NotSymmetric { asymmetry: asym });
        }
        Ok(Self::symmetrize(m))
    }

    /// Takes `(M + Mᵀ)/2` without checking.
    pub fn symmetrize(m: DMatrix<f64>) -> Self {
        let n = m.nrows();
        assert_eq!(n, m.ncols(), "symmetrize requires a square matrix");
        let mut data = m;
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (data[(i, j)] + data[(j, i)]);
                data[(i, j)] = v;
                data[(j, i)] = v;
            }
        }
        Self { data }
    }

    pub fn identity(dim: usize) -> Self {
        Self { data: DMatrix::identity(dim, dim) }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self { data: DMatrix::from_diagonal(&DVector::from_column_slice(diag)) }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, LinalgError> {
        let n = rows.len();
        for r in rows {
            if r.len() != n {
                return Err(LinalgError::NotSquare { rows: n, cols: r.len() });
            }
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    pub fn trace(&self) -> f64 {
        self.data.trace()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { data: &self.data * s }
    }

    /// Quadratic form `vᵀ S v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> Result<f64, LinalgError> {
        check_dim(self.dim(), v.len())?;
        Ok(v.dot(&(&self.data * v)))
    }
}

/// A symmetric matrix certified positive semi-definite, with a lower bound on
/// its smallest eigenvalue. A strictly positive bound certifies invertibility.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdMatrix {
    base: SymMatrix,
    min_eigenvalue_bound: f64,
}

impl PsdMatrix {
    /// Certifies `s` by eigendecomposition. Eigenvalues down to
    /// `-1e-10 * max|w|` are accepted as numerical zero.
    pub fn new(s: SymMatrix) -> Result<Self, LinalgError> {
        let eig = sym_eigen(&s)?;
        let scale = eig.max_abs();
        let min = eig.values.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -PSD_TOLERANCE * scale {
            return Err(LinalgError::NotPsd { min_eigenvalue: min });
        }
        let bound = (min - PSD_TOLERANCE * scale).max(0.0);
        Ok(Self { base: s, min_eigenvalue_bound: bound })
    }

    pub fn identity(dim: usize) -> Self {
        Self { base: SymMatrix::identity(dim), min_eigenvalue_bound: 1.0 }
    }

    /// Diagonal matrix with nonnegative entries.
    pub fn from_diagonal(diag: &[f64]) -> Result<Self, LinalgError> {
        if let Some(&neg) = diag.iter().find(|v| **v < 0.0) {
            return Err(LinalgError::NotPsd { min_eigenvalue: neg });
        }
        let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
        let max = diag.iter().copied().fold(0.0, f64::max);
        Ok(Self {
            base: SymMatrix::from_diagonal(diag),
            min_eigenvalue_bound: (min - PSD_TOLERANCE * max).max(0.0),
        })
    }

    /// Caller guarantees the bound holds.
    pub(crate) fn with_bound(base: SymMatrix, min_eigenvalue_bound: f64) -> Self {
        Self { base, min_eigenvalue_bound }
    }

    pub fn sym(&self) -> &SymMatrix {
        &self.base
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        self.base.matrix()
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn min_eigenvalue_bound(&self) -> f64 {
        self.min_eigenvalue_bound
    }

    pub fn is_positive_definite(&self) -> bool {
        self.min_eigenvalue_bound > 0.0
    }

    pub fn trace(&self) -> f64 {
        self.base.trace()
    }

    /// Nonnegative rescaling; the eigenvalue bound scales with it.
    pub fn scaled(&self, s: f64) -> Self {
        assert!(s >= 0.0, "PSD matrices only admit nonnegative scaling");
        Self { base: self.base.scaled(s), min_eigenvalue_bound: self.min_eigenvalue_bound * s }
    }

    pub fn cholesky(&self) -> Result<CholeskyFactor, LinalgError> {
        cholesky(self)
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues in descending order and
/// eigenvectors stored as the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn max_abs(&self) -> f64 {
        self.values.amax()
    }

    /// `V diag(g(w)) Vᵀ`.
    pub fn reconstruct_with(&self, g: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            let w = g(self.values[j]);
            scaled.column_mut(j).scale_mut(w);
        }
        scaled * self.vectors.transpose()
    }
}

/// Cyclic Jacobi eigendecomposition.
///
/// Stops when the off-diagonal Frobenius norm drops below `1e-12` times the
/// Frobenius norm of the input, or fails after `100 d²` rotations.
pub fn sym_eigen(s: &SymMatrix) -> Result<SymEigen, LinalgError> {
    let n = s.dim();
    let mut a = s.matrix().clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let total = a.norm();
    let target = JACOBI_THRESHOLD * total;
    let cap = 100 * n * n;
    let mut rotations = 0usize;

    let off_norm = |a: &DMatrix<f64>| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += a[(i, j)] * a[(i, j)];
                }
            }
        }
        acc.sqrt()
    };

    loop {
        let off = off_norm(&a);
        if off <= target || off == 0.0 {
            break;
        }
        if rotations >= cap {
            return Err(LinalgError::NoConvergence { rotations, residual: off });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;

                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
                rotations += 1;
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &v.column(src));
    }
    Ok(SymEigen { values, vectors })
}

/// Frobenius-nearest PSD matrix: clamp negative eigenvalues to zero.
pub fn psd_project(s: &SymMatrix) -> Result<PsdMatrix, LinalgError> {
    let eig = sym_eigen(s)?;
    let projected = SymMatrix::symmetrize(eig.reconstruct_with(|w| w.max(0.0)));
    let scale = eig.max_abs();
    let min = eig.values.iter().copied().fold(f64::INFINITY, f64::min).max(0.0);
    let bound = (min - PSD_TOLERANCE * scale).max(0.0);
    Ok(PsdMatrix::with_bound(projected, bound))
}

/// Lower-triangular `L` with `L Lᵀ = A` and a strictly positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }

    /// Solves `L z = b` by forward substitution.
    pub fn solve_lower(&self, b: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
        check_dim(self.dim(), b.len())?;
        let n = self.dim();
        let mut z = b.clone();
        for i in 0..n {
            let mut acc = z[i];
            for k in 0..i {
                acc -= self.lower[(i, k)] * z[k];
            }
            z[i] = acc / self.lower[(i, i)];
        }
        Ok(z)
    }

    /// Solves `Lᵀ z = b` by back substitution.
    pub fn solve_upper(&self, b: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
        check_dim(self.dim(), b.len())?;
        let n = self.dim();
        let mut z = b.clone();
        for i in (0..n).rev() {
            let mut acc = z[i];
            for k in (i + 1)..n {
                acc -= self.lower[(k, i)] * z[k];
            }
            z[i] = acc / self.lower[(i, i)];
        }
        Ok(z)
    }

    /// `A⁻¹ b` via two triangular solves.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
        self.solve_upper(&self.solve_lower(b)?)
    }

    /// `‖β‖_{A⁻¹} = ‖L⁻¹β‖₂`.
    pub fn dual_norm(&self, beta: &DVector<f64>) -> Result<f64, LinalgError> {
        Ok(self.solve_lower(beta)?.norm())
    }

    /// `‖Lᵀ v‖₂`, the norm induced by `A`.
    pub fn primal_norm(&self, v: &DVector<f64>) -> Result<f64, LinalgError> {
        check_dim(self.dim(), v.len())?;
        Ok((self.lower.transpose() * v).norm())
    }
}

/// Cholesky factorization. Pivots at or below `1e-14` times the largest
/// diagonal entry are rejected, naming the (1-based) leading minor.
pub fn cholesky(a: &PsdMatrix) -> Result<CholeskyFactor, LinalgError> {
    let m = a.matrix();
    let n = m.nrows();
    let floor = 1e-14 * (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut diag = m[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > floor) {
            return Err(LinalgError::NotPositiveDefinite { minor: j + 1, pivot: diag });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut acc = m[(i, j)];
            for k in 0..j {
                acc -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = acc / ljj;
        }
    }
    Ok(CholeskyFactor { lower: l })
}

/// `√((x − x')ᵀ A (x − x'))`.
pub fn mahalanobis_dist(
    a: &PsdMatrix,
    x: &DVector<f64>,
    x_prime: &DVector<f64>,
) -> Result<f64, LinalgError> {
    check_dim(a.dim(), x.len())?;
    check_dim(a.dim(), x_prime.len())?;
    let diff = x - x_prime;
    Ok(a.sym().quad_form(&diff)?.max(0.0).sqrt())
}

/// Dual of the `A`-norm: `√(βᵀ A⁻¹ β)`, computed with triangular solves.
pub fn dual_norm(a: &PsdMatrix, beta: &DVector<f64>) -> Result<f64, LinalgError> {
    check_dim(a.dim(), beta.len())?;
    cholesky(a)?.dual_norm(beta)
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<(), LinalgError> {
    if expected != found {
        Err(LinalgError::DimensionMismatch { expected, found })
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sym(rows: &[&[f64]]) -> SymMatrix {
        SymMatrix::from_rows(rows).unwrap()
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn eigen_identity() {
        let e = sym_eigen(&SymMatrix::identity(2)).unwrap();
        assert_abs_diff_eq!(e.values[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.values[1], 1.0, epsilon = 1e-12);
        let vtv = e.vectors.transpose() * &e.vectors;
        assert!(rel_err(&vtv, &DMatrix::identity(2, 2)) < 1e-9);
    }

    #[test]
    fn eigen_two_by_two() {
        let s = sym(&[&[1.0, 2.0], &[2.0, 1.0]]);
        let e = sym_eigen(&s).unwrap();
        assert_abs_diff_eq!(e.values[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.values[1], -1.0, epsilon = 1e-12);
        assert!(rel_err(&e.reconstruct_with(|w| w), s.matrix()) < 1e-9);
    }

    #[test]
    fn eigen_diagonal_sorted() {
        let e = sym_eigen(&SymMatrix::from_diagonal(&[2.0, 5.0, 0.0])).unwrap();
        assert_eq!(e.values.as_slice(), &[5.0, 2.0, 0.0]);
    }

    #[test]
    fn project_examples() {
        let p = psd_project(&sym(&[&[1.0, 2.0], &[2.0, 1.0]])).unwrap();
        let want = DMatrix::from_element(2, 2, 1.5);
        assert!((p.matrix() - want).amax() < 1e-12);

        let neg = SymMatrix::symmetrize(-DMatrix::<f64>::identity(3, 3));
        assert!(psd_project(&neg).unwrap().matrix().amax() < 1e-15);

        let psd = sym(&[&[2.0, 0.5], &[0.5, 1.0]]);
        let p = psd_project(&psd).unwrap();
        assert!(rel_err(p.matrix(), psd.matrix()) < 1e-9);
    }

    #[test]
    fn cholesky_examples() {
        let l = cholesky(&PsdMatrix::identity(3)).unwrap();
        assert_eq!(l.lower(), &DMatrix::<f64>::identity(3, 3));

        let l = cholesky(&PsdMatrix::from_diagonal(&[4.0, 9.0]).unwrap()).unwrap();
        assert_abs_diff_eq!(l.lower()[(0, 0)], 2.0);
        assert_abs_diff_eq!(l.lower()[(1, 1)], 3.0);

        let a = PsdMatrix::new(sym(&[&[4.0, 2.0], &[2.0, 5.0]])).unwrap();
        let l = cholesky(&a).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 2.0]);
        assert!((l.lower() - want).amax() < 1e-14);
    }

    #[test]
    fn cholesky_names_failing_minor() {
        let a = PsdMatrix::with_bound(sym(&[&[1.0, 1.0], &[1.0, 1.0]]), 0.0);
        match cholesky(&a) {
            Err(LinalgError::NotPositiveDefinite { minor, .. }) => assert_eq!(minor, 2),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn mahalanobis_examples() {
        let id = PsdMatrix::identity(2);
        let x = DVector::from_vec(vec![3.0, 4.0]);
        let z = DVector::zeros(2);
        assert_abs_diff_eq!(mahalanobis_dist(&id, &x, &z).unwrap(), 5.0);
        let a = PsdMatrix::from_diagonal(&[4.0, 1.0]).unwrap();
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        assert_abs_diff_eq!(mahalanobis_dist(&a, &e1, &z).unwrap(), 2.0);
        assert_eq!(mahalanobis_dist(&a, &x, &x).unwrap(), 0.0);
        assert!(matches!(
            mahalanobis_dist(&a, &DVector::zeros(3), &z),
            Err(LinalgError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dual_norm_examples() {
        let b = DVector::from_vec(vec![2.0, 3.0]);
        assert_abs_diff_eq!(dual_norm(&PsdMatrix::identity(2), &b).unwrap(), 13f64.sqrt(), epsilon = 1e-14);
        let a = PsdMatrix::from_diagonal(&[4.0, 1.0]).unwrap();
        assert_abs_diff_eq!(dual_norm(&a, &b).unwrap(), 10f64.sqrt(), epsilon = 1e-14);
        assert_eq!(dual_norm(&a, &DVector::zeros(2)).unwrap(), 0.0);
    }

    #[test]
    fn rejects_asymmetric_and_indefinite() {
        assert!(matches!(
            SymMatrix::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]),
            Err(LinalgError::NotSymmetric { .. })
        ));
        assert!(matches!(
            PsdMatrix::new(sym(&[&[1.0, 2.0], &[2.0, 1.0]])),
            Err(LinalgError::NotPsd { .. })
        ));
    }
}
