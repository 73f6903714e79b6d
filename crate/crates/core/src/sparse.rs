//! Compressed sparse row matrices for graph propagation.

use ndarray::Array2;

use crate::autograd::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Builds a matrix from per-row `(column, value)` lists. Columns within a
    /// row are sorted; duplicate columns are summed.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for mut row in rows.iter().cloned() {
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                debug_assert!(c < cols);
                if last == Some(c) {
                    *values.last_mut().unwrap() += v;
                } else {
                    indices.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            indptr.push(indices.len());
        }
        Csr { rows: rows.len(), cols, indptr, indices, values }
    }

    pub fn identity(n: usize) -> Self {
        Csr {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Mat {
        let mut out = Array2::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[[r, c]] += v;
            }
        }
        out
    }

    pub fn transpose(&self) -> Csr {
        let mut rows = vec![Vec::new(); self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                rows[c].push((r, v));
            }
        }
        Csr::from_rows(self.rows, rows)
    }

    /// `self · dense`
    pub fn matmul(&self, dense: &Mat) -> Mat {
        assert_eq!(self.cols, dense.nrows(), "sparse matmul shape mismatch");
        let mut out = Array2::zeros((self.rows, dense.ncols()));
        for r in 0..self.rows {
            let mut dst = out.row_mut(r);
            for (c, v) in self.row(r) {
                dst.scaled_add(v, &dense.row(c));
            }
        }
        out
    }
}
