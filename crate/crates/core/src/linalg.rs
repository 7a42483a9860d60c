//! Small dense vector kernels and a cyclic Jacobi eigensolver for symmetric
//! matrices.
//!
//! The solver runs fixed-order sweeps of plane rotations until the
//! off-diagonal Frobenius norm drops below `1e-12` relative to the matrix
//! norm, so identical inputs always produce bit-identical output.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LinalgError {
    #[error("matrix is not square: {len} elements for order {n}")]
    NotSquare { len: usize, n: usize },
    #[error("jacobi sweep limit reached without convergence")]
    NoConvergence,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Result of a symmetric eigendecomposition. `values[i]` pairs with the unit
/// eigenvector `vectors[i]`; no ordering is imposed here.
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

const JACOBI_TOLERANCE: f64 = 1e-12;
const MAX_SWEEPS: usize = 64;

/// Cyclic Jacobi eigendecomposition of a symmetric `n x n` matrix given in
/// row-major order. The input is copied; only its upper triangle is trusted
/// to mirror the lower one.
pub fn jacobi_eigen(matrix: &[f64], n: usize) -> Result<SymmetricEigen, LinalgError> {
    if matrix.len() != n * n {
        return Err(LinalgError::NotSquare {
            len: matrix.len(),
            n,
        });
    }
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    if n <= 1 {
        return Ok(SymmetricEigen {
            values: a.clone(),
            vectors: vec![vec![1.0; n.min(1)]; n],
        });
    }

    // Convergence threshold scales with the matrix so large spectra are
    // not asked for sub-roundoff absolute accuracy.
    let frobenius: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let threshold = JACOBI_TOLERANCE * frobenius.max(1.0);

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n - 1 {
            for q in p + 1..n {
                off += 2.0 * a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() <= threshold {
            let values = (0..n).map(|i| a[i * n + i]).collect();
            let vectors = (0..n)
                .map(|i| (0..n).map(|r| v[r * n + i]).collect())
                .collect();
            return Ok(SymmetricEigen { values, vectors });
        }

        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                // Smaller-magnitude tangent keeps rotations below 45 degrees.
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // Right-multiply columns p and q by the rotation...
                for j in 0..n {
                    let ajp = a[j * n + p];
                    let ajq = a[j * n + q];
                    a[j * n + p] = c * ajp - s * ajq;
                    a[j * n + q] = s * ajp + c * ajq;
                }
                // ...then left-multiply rows p and q by its transpose.
                for j in 0..n {
                    let apj = a[p * n + j];
                    let aqj = a[q * n + j];
                    a[p * n + j] = c * apj - s * aqj;
                    a[q * n + j] = s * apj + c * aqj;
                }
                for j in 0..n {
                    let vjp = v[j * n + p];
                    let vjq = v[j * n + q];
                    v[j * n + p] = c * vjp - s * vjq;
                    v[j * n + q] = s * vjp + c * vjq;
                }
            }
        }
    }

    Err(LinalgError::NoConvergence)
}
