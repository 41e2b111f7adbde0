use crate::tensor::{axpy, Matrix};

/// Constant sparse matrix in CSR form with real weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from per-row `(col, weight)` lists.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for row in &rows {
            for &(c, w) in row {
                assert!(c < cols, "column {c} out of range");
                indices.push(c);
                weights.push(w);
            }
            offsets.push(indices.len());
        }
        SparseMatrix { rows: rows.len(), cols, offsets, indices, weights }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.weights[span].iter().copied())
    }

    /// `self * x`
    pub fn matmul(&self, x: &Matrix) -> Matrix {
        assert_eq!(self.cols, x.rows(), "sparse matmul shape");
        let mut out = Matrix::zeros(self.rows, x.cols());
        for r in 0..self.rows {
            let dst = out.row_mut(r);
            for (c, w) in self.row(r) {
                axpy(w, x.row(c), dst);
            }
        }
        out
    }

    /// `selfᵀ * y`, accumulated into `out`.
    pub fn transpose_matmul_into(&self, y: &Matrix, out: &mut Matrix) {
        assert_eq!(self.rows, y.rows(), "sparse transpose matmul shape");
        assert_eq!(out.shape(), (self.cols, y.cols()));
        for r in 0..self.rows {
            let src = y.row(r);
            for (c, w) in self.row(r) {
                axpy(w, src, out.row_mut(c));
            }
        }
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, w) in self.row(r) {
                out.set(r, c, out.get(r, c) + w);
            }
        }
        out
    }
}
