//! Dense row-major f64 matrices and the small amount of linear algebra the
//! rest of the crate needs (LU solve, power iteration).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is singular or near-singular (estimated condition {cond:.3e})")]
    IllConditioned { cond: f64 },
    #[error("power iteration on an all-zero matrix")]
    ZeroMatrix,
    #[error("dimension mismatch: {0}")]
    Dim(String),
}

/// Dense matrix of f64 values in row-major order. Column vectors are `n x 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        Tensor { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c);
            data.extend_from_slice(row);
        }
        Tensor { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn eye(n: usize) -> Self {
        Tensor::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn col(values: &[f64]) -> Self {
        Tensor { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_scalar(&self) -> f64 {
        assert_eq!(self.len(), 1, "as_scalar on non-scalar tensor");
        self.data[0]
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "zip shape mismatch");
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul_elem(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Row-major ikj matrix product; the hot loop of the crate.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.cols, other.rows,
            "matmul inner dimension mismatch: {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let c_row = &mut out[i * n..(i + 1) * n];
            for (p, &a_ip) in a_row.iter().enumerate() {
                if a_ip == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for j in 0..n {
                    c_row[j] += a_ip * b_row[j];
                }
            }
        }
        Tensor { rows: m, cols: n, data: out }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Euclidean norm of a tensor flattened to a vector.
    pub fn l2_norm(&self) -> f64 {
        self.frobenius_norm()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.rows);
        Tensor {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.cols);
        Tensor::from_fn(self.rows, len, |i, j| self.get(i, start + j))
    }

    pub fn concat_rows(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols);
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Tensor { rows: self.rows + other.rows, cols: self.cols, data }
    }

    pub fn concat_cols(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows);
        Tensor::from_fn(self.rows, self.cols + other.cols, |i, j| {
            if j < self.cols {
                self.get(i, j)
            } else {
                other.get(i, j - self.cols)
            }
        })
    }

    /// n x n diagonal matrix from an n x 1 vector.
    pub fn diag_from_vec(&self) -> Tensor {
        assert_eq!(self.cols, 1, "diag_from_vec expects a column vector");
        let n = self.rows;
        Tensor::from_fn(n, n, |i, j| if i == j { self.data[i] } else { 0.0 })
    }
}

/// LU factorization with partial pivoting of a square matrix.
pub struct Lu {
    lu: Tensor,
    piv: Vec<usize>,
    /// Crude condition estimate: max |U_ii| / min |U_ii|.
    pub cond_estimate: f64,
}

/// Estimated-condition threshold above which a solve is rejected.
pub const COND_LIMIT: f64 = 1e12;

impl Lu {
    pub fn factor(a: &Tensor) -> Result<Lu, LinalgError> {
        if a.rows != a.cols {
            return Err(LinalgError::Dim(format!("LU of non-square {:?}", a.shape())));
        }
        let n = a.rows;
        let mut lu = a.clone();
        let mut piv: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut best = lu.get(k, k).abs();
            for i in k + 1..n {
                let v = lu.get(i, k).abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if p != k {
                for j in 0..n {
                    let tmp = lu.get(k, j);
                    lu.set(k, j, lu.get(p, j));
                    lu.set(p, j, tmp);
                }
                piv.swap(k, p);
            }
            let pivot = lu.get(k, k);
            if pivot == 0.0 {
                return Err(LinalgError::IllConditioned { cond: f64::INFINITY });
            }
            for i in k + 1..n {
                let factor = lu.get(i, k) / pivot;
                lu.set(i, k, factor);
                for j in k + 1..n {
                    let v = lu.get(i, j) - factor * lu.get(k, j);
                    lu.set(i, j, v);
                }
            }
        }
        let mut umax: f64 = 0.0;
        let mut umin = f64::INFINITY;
        for k in 0..n {
            let d = lu.get(k, k).abs();
            umax = umax.max(d);
            umin = umin.min(d);
        }
        let cond_estimate = if umin == 0.0 { f64::INFINITY } else { umax / umin };
        if cond_estimate > COND_LIMIT {
            return Err(LinalgError::IllConditioned { cond: cond_estimate });
        }
        Ok(Lu { lu, piv, cond_estimate })
    }

    /// Solves A X = B for (possibly multi-column) B.
    pub fn solve(&self, b: &Tensor) -> Result<Tensor, LinalgError> {
        let n = self.lu.rows;
        if b.rows != n {
            return Err(LinalgError::Dim(format!(
                "solve rhs rows {} != system size {}",
                b.rows, n
            )));
        }
        let m = b.cols;
        // apply row permutation
        let mut x = Tensor::from_fn(n, m, |i, j| b.get(self.piv[i], j));
        // forward substitution with unit-lower L
        for i in 1..n {
            for k in 0..i {
                let l_ik = self.lu.get(i, k);
                if l_ik != 0.0 {
                    for j in 0..m {
                        let v = x.get(i, j) - l_ik * x.get(k, j);
                        x.set(i, j, v);
                    }
                }
            }
        }
        // back substitution with U
        for i in (0..n).rev() {
            for k in i + 1..n {
                let u_ik = self.lu.get(i, k);
                if u_ik != 0.0 {
                    for j in 0..m {
                        let v = x.get(i, j) - u_ik * x.get(k, j);
                        x.set(i, j, v);
                    }
                }
            }
            let d = self.lu.get(i, i);
            for j in 0..m {
                let v = x.get(i, j) / d;
                x.set(i, j, v);
            }
        }
        Ok(x)
    }
}

/// Solves the square system A X = B by LU with partial pivoting.
pub fn solve(a: &Tensor, b: &Tensor) -> Result<Tensor, LinalgError> {
    Lu::factor(a)?.solve(b)
}

/// Largest singular value of `a` and the corresponding right singular vector,
/// by power iteration on A^T A. `start` warm-starts the iteration; the
/// returned vector can be cached and fed back in on the next call.
pub fn power_iteration(
    a: &Tensor,
    start: Option<&Tensor>,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, Tensor), LinalgError> {
    if a.data.iter().all(|&v| v == 0.0) {
        return Err(LinalgError::ZeroMatrix);
    }
    let n = a.cols;
    let mut v = match start {
        Some(s) if s.rows == n && s.cols == 1 && s.l2_norm() > 0.0 => s.clone(),
        // deterministic start with nonzero overlap against any direction
        _ => Tensor::from_fn(n, 1, |i, _| 1.0 + (i as f64) * 1e-3),
    };
    let nv = v.l2_norm();
    v = v.scale(1.0 / nv);
    let at = a.transpose();
    let mut sigma = 0.0;
    for _ in 0..max_iter {
        let av = a.matmul(&v);
        let w = at.matmul(&av);
        let nw = w.l2_norm();
        if nw == 0.0 {
            // v landed in the null space; restart from a fixed perturbed vector
            v = Tensor::from_fn(n, 1, |i, _| ((i + 1) as f64).sin() + 0.5);
            let nv = v.l2_norm();
            v = v.scale(1.0 / nv);
            continue;
        }
        let new_v = w.scale(1.0 / nw);
        let new_sigma = a.matmul(&new_v).l2_norm();
        let converged = (new_sigma - sigma).abs() <= tol * new_sigma.max(1e-300);
        sigma = new_sigma;
        v = new_v;
        if converged {
            break;
        }
    }
    Ok((sigma, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[1.0], &[1.0]]);
        let c = a.matmul(&b);
        assert_eq!(c.data, vec![3.0, 7.0]);
    }

    #[test]
    fn solve_identity_returns_rhs() {
        let b = Tensor::from_rows(&[&[2.0], &[-1.0], &[0.5]]);
        let x = solve(&Tensor::eye(3), &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn solve_random_system_residual() {
        let a = Tensor::from_rows(&[&[4.0, 1.0, 0.3], &[-2.0, 5.0, 1.0], &[0.1, -0.7, 3.0]]);
        let b = Tensor::from_rows(&[&[1.0], &[2.0], &[3.0]]);
        let x = solve(&a, &b).unwrap();
        let r = a.matmul(&x).sub(&b);
        assert!(r.max_abs() < 1e-12);
    }

    #[test]
    fn solve_singular_rejected() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        let b = Tensor::from_rows(&[&[1.0], &[1.0]]);
        assert!(solve(&a, &b).is_err());
    }

    #[test]
    fn power_iteration_diagonal() {
        let a = Tensor::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]);
        let (sigma, _) = power_iteration(&a, None, 1e-12, 1000).unwrap();
        assert!((sigma - 3.0).abs() < 1e-9);
    }

    #[test]
    fn power_iteration_zero_matrix_errors() {
        let a = Tensor::zeros(3, 3);
        assert!(matches!(power_iteration(&a, None, 1e-9, 100), Err(LinalgError::ZeroMatrix)));
    }

    #[test]
    fn transpose_slice_concat() {
        let a = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        assert_eq!(a.transpose().get(2, 1), 6.0);
        assert_eq!(a.slice_cols(1, 2).data, vec![2.0, 3.0, 5.0, 6.0]);
        assert_eq!(a.slice_rows(1, 1).data, vec![4.0, 5.0, 6.0]);
        let c = a.concat_cols(&Tensor::from_rows(&[&[7.0], &[8.0]]));
        assert_eq!(c.cols, 4);
        assert_eq!(c.get(1, 3), 8.0);
    }
}
