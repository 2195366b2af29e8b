//! Small dense linear algebra on row-major `f64` storage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Error::check_dim("matrix data", rows * cols, data.len())?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            Error::check_dim("matrix row", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ x`.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            if *xi != 0.0 {
                axpy(*xi, self.row(i), &mut out);
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, other.rows);
        Matrix {
            rows: self.rows,
            cols: other.cols,
            data: matmul_raw(&self.data, &other.data, self.rows, self.cols, other.cols),
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data: transpose_raw(&self.data, self.rows, self.cols),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        max_abs_diff(&self.data, &other.data)
    }

    /// Eigenvalues of the symmetric part, ascending.
    pub fn symmetric_eigenvalues(&self) -> Vec<f64> {
        let n = self.rows;
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| 0.5 * (self.get(i, j) + self.get(j, i)));
        let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Eigenvalues of a general square matrix as (re, im) pairs sorted by real part.
    pub fn eigenvalues(&self) -> Vec<(f64, f64)> {
        let n = self.rows;
        let m = nalgebra::DMatrix::from_row_slice(n, n, &self.data);
        let mut ev: Vec<(f64, f64)> = m
            .complex_eigenvalues()
            .iter()
            .map(|c| (c.re, c.im))
            .collect();
        ev.sort_by(|a, b| a.0.total_cmp(&b.0));
        ev
    }

    pub fn determinant(&self) -> f64 {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data).determinant()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn mean(a: &[f64]) -> f64 {
    if a.is_empty() {
        0.0
    } else {
        a.iter().sum::<f64>() / a.len() as f64
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(aip, &b[p * c..(p + 1) * c], orow);
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Fails with [`Error::RankDeficient`] when a pivot falls below `tol` times the largest diagonal.
    pub fn new(a: &Matrix, tol: f64) -> Result<Self> {
        let n = a.rows;
        let scale = (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max).max(1e-300);
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a.get(j, j);
            for p in 0..j {
                d -= l[j * n + p] * l[j * n + p];
            }
            if !(d > tol * scale) {
                return Err(Error::RankDeficient { row: j, pivot: d });
            }
            let d = d.sqrt();
            l[j * n + j] = d;
            for i in j + 1..n {
                let mut s = a.get(i, j);
                for p in 0..j {
                    s -= l[i * n + p] * l[j * n + p];
                }
                l[i * n + j] = s / d;
            }
        }
        Ok(Cholesky { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for p in 0..i {
                s -= self.l[i * n + p] * y[p];
            }
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for p in i + 1..n {
                s -= self.l[p * n + i] * y[p];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }
}

/// Solve `U X = B` for upper-triangular `U` (n×n) and `B` (n×c), all row-major.
pub(crate) fn upper_solve(u: &[f64], b: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let uii = u[i * n + i];
        for p in i + 1..n {
            let uip = u[i * n + p];
            if uip != 0.0 {
                for j in 0..c {
                    x[i * c + j] -= uip * x[p * c + j];
                }
            }
        }
        for j in 0..c {
            x[i * c + j] /= uii;
        }
    }
    x
}

/// Solve `Uᵀ X = B` for upper-triangular `U`.
pub(crate) fn upper_t_solve(u: &[f64], b: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..n {
        let uii = u[i * n + i];
        for p in 0..i {
            let upi = u[p * n + i];
            if upi != 0.0 {
                for j in 0..c {
                    x[i * c + j] -= upi * x[p * c + j];
                }
            }
        }
        for j in 0..c {
            x[i * c + j] /= uii;
        }
    }
    x
}

/// Dense LU solve with partial pivoting, used by the interior-point method.
pub(crate) fn lu_solve(a: &Matrix, b: &[f64]) -> Option<Vec<f64>> {
    let m = nalgebra::DMatrix::from_row_slice(a.rows, a.cols, &a.data);
    let rhs = nalgebra::DVector::from_column_slice(b);
    m.lu().solve(&rhs).map(|x| x.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = Matrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let c = Cholesky::new(&a, 1e-12).unwrap();
        let x = c.solve(&[1.0, 2.0]);
        let r = a.matvec(&x);
        assert!(max_abs_diff(&r, &[1.0, 2.0]) < 1e-14);
    }

    #[test]
    fn cholesky_rejects_singular() {
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(
            Cholesky::new(&a, 1e-10),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn triangular_solves_invert_products() {
        let u = vec![2.0, 1.0, -1.0, 0.0, 3.0, 0.5, 0.0, 0.0, 1.5];
        let x = vec![1.0, -2.0, 0.5, 4.0, 3.0, 1.0];
        let b = matmul_raw(&u, &x, 3, 3, 2);
        assert!(max_abs_diff(&upper_solve(&u, &b, 3, 2), &x) < 1e-13);
        let ut = transpose_raw(&u, 3, 3);
        let bt = matmul_raw(&ut, &x, 3, 3, 2);
        assert!(max_abs_diff(&upper_t_solve(&u, &bt, 3, 2), &x) < 1e-13);
    }

    #[test]
    fn transpose_matvec_agrees() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(a.matvec_t(&[1.0, -1.0]), a.transpose().matvec(&[1.0, -1.0]));
    }
}
