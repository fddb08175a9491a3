//! Symmetric eigendecomposition, PSD projection and the dual norm.

use dro_cost::linalg::{dual_norm, psd_project, sym_eigen, PsdMatrix, SymMatrix};
use nalgebra::DVector;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let s = SymMatrix::from_rows(&[&[2.0, 1.0, 0.0], &[1.0, -1.0, 0.5], &[0.0, 0.5, 0.3]])?;
    let eig = sym_eigen(&s)?;
    println!("eigenvalues (descending): {:.6}", eig.values.transpose());

    // Negative eigenvalues are clipped; the result is the nearest PSD matrix
    // in Frobenius norm.
    let p = psd_project(&s)?;
    println!("PSD projection:{:.6}", p.matrix());

    let a = PsdMatrix::from_diagonal(&[4.0, 1.0])?;
    let beta = DVector::from_vec(vec![2.0, 3.0]);
    let chol = a.cholesky()?;
    let star = chol.solve(&beta)?;
    let star = &star / chol.primal_norm(&star)?;
    println!("‖β‖ dual = {:.6}, attained by u* = {:.4} with βᵀu* = {:.6}", dual_norm(&a, &beta)?, star.transpose(), beta.dot(&star));
    Ok(())
}
