//! Dense symmetric solves shared by the training and filter modules.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

/// Condition-number estimate above which the pseudo-inverse route is taken.
pub const PINV_CONDITION_LIMIT: f64 = 1e12;

/// How a symmetric system was solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolvePath {
    Cholesky,
    PseudoInverse,
}

/// Solution of `A X = B` for symmetric PSD `A`.
#[derive(Debug, Clone)]
pub struct SymmetricSolve {
    pub solution: DMatrix<f64>,
    pub path: SolvePath,
    /// Condition estimate of the Jacobi-equilibrated matrix (infinite when the
    /// factorisation failed).
    pub condition: f64,
}

/// Solve `A X = B` with a Jacobi-equilibrated Cholesky factorisation, falling
/// back to the minimum-norm pseudo-inverse solution when `A` is singular or
/// too ill-conditioned.
pub fn solve_symmetric(a: &DMatrix<f64>, b: &DMatrix<f64>) -> SymmetricSolve {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    debug_assert_eq!(n, b.nrows());

    let scale = DVector::from_iterator(
        n,
        a.diagonal().iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 1.0 }),
    );
    let mut scaled = a.clone();
    for j in 0..n {
        for i in 0..n {
            scaled[(i, j)] *= scale[i] * scale[j];
        }
    }

    if let Some(chol) = Cholesky::new(scaled) {
        let condition = cholesky_condition(chol.l_dirty());
        if condition <= PINV_CONDITION_LIMIT {
            let mut rhs = b.clone();
            for (i, mut row) in rhs.row_iter_mut().enumerate() {
                row *= scale[i];
            }
            let mut x = chol.solve(&rhs);
            for (i, mut row) in x.row_iter_mut().enumerate() {
                row *= scale[i];
            }
            return SymmetricSolve {
                solution: x,
                path: SolvePath::Cholesky,
                condition,
            };
        }
        log::debug!("equilibrated condition estimate {condition:e} exceeds limit; using pseudo-inverse");
    }

    SymmetricSolve {
        solution: pseudo_inverse_symmetric(a) * b,
        path: SolvePath::PseudoInverse,
        condition: f64::INFINITY,
    }
}

/// Squared ratio of the extreme Cholesky pivots, a cheap lower bound on the
/// 2-norm condition number.
pub fn cholesky_condition(l: &DMatrix<f64>) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
    for i in 0..l.nrows() {
        let d = l[(i, i)].abs();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        (hi / lo).powi(2)
    }
}

/// Moore-Penrose inverse of a symmetric matrix via its eigendecomposition,
/// discarding eigenvalues below `max|eig| / PINV_CONDITION_LIMIT`.
pub fn pseudo_inverse_symmetric(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let cutoff = max / PINV_CONDITION_LIMIT;
    let inv = eig
        .eigenvalues
        .map(|v| if v.abs() > cutoff { 1.0 / v } else { 0.0 });
    let q = &eig.eigenvectors;
    q * DMatrix::from_diagonal(&inv) * q.transpose()
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.clone())
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v))
}

/// Symmetrise in place, `A <- (A + A^T) / 2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_path_solves_badly_scaled_system() {
        // diag(1e8, 1) with coupling: equilibration keeps this on the fast path
        let a = DMatrix::from_row_slice(2, 2, &[1e8, 1e3, 1e3, 1.0 + 1e-2]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let s = solve_symmetric(&a, &b);
        assert_eq!(s.path, SolvePath::Cholesky);
        let r = &a * &s.solution - &b;
        assert!(r.norm() < 1e-9);
    }

    #[test]
    fn singular_system_gives_minimum_norm_solution() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[2.0, 2.0]);
        let s = solve_symmetric(&a, &b);
        assert_eq!(s.path, SolvePath::PseudoInverse);
        assert!((s.solution[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((s.solution[(1, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_of_parallel_vectors_is_one() {
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }
}
