//! Minimal dense linear algebra over row-major `f64` storage.
//!
//! Everything the attention kernels need is here: product, transpose, Hadamard
//! product, diagonal row scaling, row/column blocking, and max-norm error
//! helpers. Accumulation order is fixed (row by row, innermost loop over the
//! shared dimension), so two code paths performing the same operations on the
//! same data produce bit-identical results. No blocking or BLAS: at the sizes
//! this workspace targets (N <= 4096, d_h <= 128) the naive loops are fine.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use crate::{Error, Result};

/// Dense row-major matrix of `f64` values.
///
/// Invariant: `data.len() == rows * cols` at all times.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data; the length must match `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Length {
                op: "Matrix::from_vec",
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from explicit rows; handy in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Length {
                    op: "Matrix::from_rows",
                    expected: c,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self { rows: r, cols: c, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Square matrix with `w` on the diagonal.
    pub fn diag(w: &[f64]) -> Self {
        let mut m = Self::zeros(w.len(), w.len());
        for (i, &x) in w.iter().enumerate() {
            m[(i, i)] = x;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Row `r` as a contiguous slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Standard matrix product with fixed accumulation order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.cols {
            let mut acc = 0.0;
            for (k, &aik) in arow.iter().enumerate() {
                acc += aik * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

pub fn transpose(a: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.cols, a.rows);
    for i in 0..a.rows {
        for j in 0..a.cols {
            out.data[j * a.rows + i] = a.data[i * a.cols + j];
        }
    }
    out
}

/// Elementwise product.
pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "hadamard",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| x * y)
        .collect();
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    })
}

/// Scales row `i` by `w[i]`; equal to `diag(w) * a` without forming the diagonal.
pub fn row_scale(a: &Matrix, w: &[f64]) -> Result<Matrix> {
    if w.len() != a.rows {
        return Err(Error::Length {
            op: "row_scale",
            expected: a.rows,
            found: w.len(),
        });
    }
    if !w.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("row_scale weights"));
    }
    let mut out = a.clone();
    for (i, &wi) in w.iter().enumerate() {
        for x in &mut out.data[i * a.cols..(i + 1) * a.cols] {
            *x *= wi;
        }
    }
    Ok(out)
}

pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "add",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    })
}

pub fn scale(a: &Matrix, s: f64) -> Matrix {
    let data = a.data.iter().map(|x| x * s).collect();
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    }
}

/// Splits into row blocks of `block` rows each; `block` must divide `rows`.
pub fn split_rows(a: &Matrix, block: usize) -> Result<Vec<Matrix>> {
    if block == 0 || !a.rows.is_multiple_of(block) {
        return Err(Error::Partition(alloc::format!(
            "row block {} does not divide row count {}",
            block,
            a.rows
        )));
    }
    let mut out = Vec::with_capacity(a.rows / block);
    for start in (0..a.rows).step_by(block) {
        let data = a.data[start * a.cols..(start + block) * a.cols].to_vec();
        out.push(Matrix {
            rows: block,
            cols: a.cols,
            data,
        });
    }
    Ok(out)
}

/// Stacks row blocks back into one matrix.
pub fn concat_rows(blocks: &[Matrix]) -> Result<Matrix> {
    let cols = blocks.first().map_or(0, |b| b.cols);
    let mut data = Vec::new();
    let mut rows = 0;
    for b in blocks {
        if b.cols != cols {
            return Err(Error::Shape {
                op: "concat_rows",
                left: (rows, cols),
                right: b.shape(),
            });
        }
        rows += b.rows;
        data.extend_from_slice(&b.data);
    }
    Ok(Matrix { rows, cols, data })
}

/// Splits into `parts` contiguous column blocks; `parts` must divide `cols`.
pub fn split_cols(a: &Matrix, parts: usize) -> Result<Vec<Matrix>> {
    if parts == 0 || !a.cols.is_multiple_of(parts) {
        return Err(Error::Partition(alloc::format!(
            "head count {} does not divide width {}",
            parts,
            a.cols
        )));
    }
    let w = a.cols / parts;
    let mut out = Vec::with_capacity(parts);
    for p in 0..parts {
        let mut data = Vec::with_capacity(a.rows * w);
        for i in 0..a.rows {
            data.extend_from_slice(&a.data[i * a.cols + p * w..i * a.cols + (p + 1) * w]);
        }
        out.push(Matrix {
            rows: a.rows,
            cols: w,
            data,
        });
    }
    Ok(out)
}

/// Joins column blocks side by side.
pub fn concat_cols(blocks: &[Matrix]) -> Result<Matrix> {
    let rows = blocks.first().map_or(0, |b| b.rows);
    let cols: usize = blocks.iter().map(|b| b.cols).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for b in blocks {
            if b.rows != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: (rows, cols),
                    right: b.shape(),
                });
            }
            data.extend_from_slice(b.row(i));
        }
    }
    Ok(Matrix { rows, cols, data })
}

pub fn max_abs(a: &Matrix) -> f64 {
    a.data.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "max_abs_diff",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(a.data
        .iter()
        .zip(&b.data)
        .fold(0.0, |m, (x, y)| m.max((x - y).abs())))
}

/// Max-norm difference divided by the larger of the two max-norms.
///
/// Returns 0 when both matrices are exactly zero.
pub fn relative_max_error(a: &Matrix, b: &Matrix) -> Result<f64> {
    let diff = max_abs_diff(a, b)?;
    let denom = max_abs(a).max(max_abs(b));
    if denom == 0.0 {
        Ok(0.0)
    } else {
        Ok(diff / denom)
    }
}
