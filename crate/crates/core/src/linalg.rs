//! Dense row-major matrices with a fixed accumulation order.

use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};

/// Row-major dense `f64` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(KanError::ShapeMismatch(format!(
                "{} elements cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(KanError::ShapeMismatch(format!(
                    "row {r} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Copies rows `[start, end)` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self · rhs`. For every output element the products are accumulated
    /// in ascending order of the shared index, so results are reproducible
    /// bit-for-bit. Zero entries of `self` are skipped, which leaves finite
    /// results unchanged and makes sparse basis matrices cheap.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        self.check_matmul(rhs)?;
        let n = rhs.cols;
        let mut out = Matrix::zeros(self.rows, n);
        for m in 0..self.rows {
            let out_row = &mut out.data[m * n..(m + 1) * n];
            for (k, &a) in self.data[m * self.cols..(m + 1) * self.cols].iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    fn check_matmul(&self, rhs: &Matrix) -> Result<()> {
        if self.cols != rhs.rows {
            return Err(KanError::ShapeMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(())
    }

    /// Dense product performing (and counting) every multiplication.
    pub fn matmul_counted<C: MulCounter>(&self, rhs: &Matrix, counter: &mut C) -> Result<Matrix> {
        self.check_matmul(rhs)?;
        let n = rhs.cols;
        let mut out = Matrix::zeros(self.rows, n);
        for m in 0..self.rows {
            let lhs_row = self.row(m);
            let out_row = &mut out.data[m * n..(m + 1) * n];
            for (k, &a) in lhs_row.iter().enumerate() {
                let rhs_row = &rhs.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
            counter.add((lhs_row.len() * n) as u64);
        }
        Ok(out)
    }

    /// `selfᵀ · rhs` without materialising the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(KanError::ShapeMismatch(format!(
                "cannot multiply ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let n = rhs.cols;
        let mut out = Matrix::zeros(self.cols, n);
        for m in 0..self.rows {
            let rhs_row = rhs.row(m);
            for (k, &a) in self.row(m).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(KanError::ShapeMismatch(format!(
                "cannot multiply {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for m in 0..self.rows {
            let a = self.row(m);
            for j in 0..rhs.rows {
                let b = rhs.row(j);
                out.data[m * rhs.rows + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Ok(out)
    }
}

/// Sink for multiplication counts. `()` discards them.
pub trait MulCounter {
    fn add(&mut self, n: u64);
}

impl MulCounter for () {
    #[inline(always)]
    fn add(&mut self, _n: u64) {}
}

impl MulCounter for u64 {
    #[inline(always)]
    fn add(&mut self, n: u64) {
        *self += n;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let mut muls = 0u64;
        let c = a.matmul_counted(&b, &mut muls).unwrap();
        assert_eq!(c.as_slice(), &[17.0, 39.0]);
        assert_eq!(muls, 4);
    }

    #[test]
    fn transposed_products_agree() {
        let a = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![3.0, 4.0, -1.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, -3.0]]).unwrap();
        assert_eq!(a.t_matmul(&b).unwrap(), a.transpose().matmul(&b).unwrap());
        let c = Matrix::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(a.matmul_t(&c).unwrap(), a.matmul(&c.transpose()).unwrap());
    }

    #[test]
    fn sparse_skip_matches_dense() {
        let a = Matrix::from_vec(3, 4, vec![0.0, 1.5, 0.0, -2.0, 0.0, 0.0, 0.0, 0.0, 0.3, 0.0, 0.7, 0.1]).unwrap();
        let b = Matrix::from_vec(4, 2, (0..8).map(|v| (v as f64 * 0.77).sin()).collect()).unwrap();
        let mut n = 0u64;
        assert_eq!(a.matmul(&b).unwrap(), a.matmul_counted(&b, &mut n).unwrap());
        assert_eq!(n, 24);
    }

    #[test]
    fn shape_errors() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(KanError::ShapeMismatch(_))));
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
