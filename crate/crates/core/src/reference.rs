//! Reference numerics used as independent oracles by the test suite.
//!
//! Nothing here is on any production code path: the implementations are
//! deliberately different algorithms from the ones they check (one-sided
//! Jacobi SVD vs power iteration, direct recursions vs vectorized code).

use crate::tensor::Tensor;

/// All singular values of `a`, descending, by one-sided Jacobi rotations.
pub fn singular_values(a: &Tensor) -> Vec<f64> {
    // one-sided Jacobi wants at least as many rows as columns
    let work = if a.rows >= a.cols { a.clone() } else { a.transpose() };
    let (m, n) = work.shape();
    // column-major copy for cheap column access
    let mut u: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| work.get(i, j)).collect())
        .collect();
    let tol = 1e-14;
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    alpha += u[p][i] * u[p][i];
                    beta += u[q][i] * u[q][i];
                    gamma += u[p][i] * u[q][i];
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt().max(1e-300));
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let up = u[p][i];
                    let uq = u[q][i];
                    u[p][i] = c * up - s * uq;
                    u[q][i] = s * up + c * uq;
                }
            }
        }
        if off < tol {
            break;
        }
    }
    let mut sv: Vec<f64> = u
        .iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Spectral norm (largest singular value) via the Jacobi SVD above.
pub fn sigma_max(a: &Tensor) -> f64 {
    singular_values(a).first().copied().unwrap_or(0.0)
}
