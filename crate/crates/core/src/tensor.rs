//! Dense row-major `f32` matrices and the handful of kernels the model needs.

use crate::exec::Exec;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
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

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_vec(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a · b`. Each output element accumulates over the inner dimension in
/// ascending order, so results match a naive per-row triple loop bit for bit.
pub fn matmul(exec: Exec, a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
    let mut out = Matrix::zeros(a.rows, b.cols);
    let n = b.cols;
    exec.for_each_row(&mut out.data, n, |i, out_row| {
        vec_mat_into(a.row(i), b, out_row);
    });
    out
}

/// `out = x · b` for a single row vector.
pub fn vec_mat_into(x: &[f32], b: &Matrix, out: &mut [f32]) {
    debug_assert_eq!(x.len(), b.rows);
    debug_assert_eq!(out.len(), b.cols);
    out.fill(0.0);
    for (k, &xk) in x.iter().enumerate() {
        let b_row = b.row(k);
        for (o, &w) in out.iter_mut().zip(b_row) {
            *o += xk * w;
        }
    }
}

/// Root-mean-square normalisation of every row (unit gain).
pub fn rms_norm(exec: Exec, x: &Matrix) -> Matrix {
    const EPS: f32 = 1e-5;
    let mut out = x.clone();
    let cols = x.cols;
    exec.for_each_row(&mut out.data, cols, |_, row| {
        let mean_sq = row.iter().map(|v| v * v).sum::<f32>() / cols as f32;
        let scale = 1.0 / (mean_sq + EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= scale);
    });
    out
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

pub fn add_assign(a: &mut Matrix, b: &Matrix) {
    assert_eq!(a.shape(), b.shape());
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
