use std::sync::{Arc, OnceLock};

/// Compressed sparse row matrix with `f64` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Builds a matrix whose row `r` holds the entries `entries[r]` as `(column, value)`.
    pub fn from_rows(cols: usize, entries: impl IntoIterator<Item = Vec<(usize, f64)>>) -> Csr {
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for row in entries {
            for (c, v) in row {
                assert!(c < cols, "column {c} out of range {cols}");
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Csr { rows: indptr.len() - 1, cols, indptr, indices, values }
    }

    /// Builds from a fixed number of entries per row, stored flat.
    pub fn from_fixed_width(cols: usize, width: usize, indices: Vec<usize>, values: Vec<f64>) -> Csr {
        assert_eq!(indices.len(), values.len());
        assert!(width > 0 && indices.len() % width == 0);
        debug_assert!(indices.iter().all(|&c| c < cols));
        let rows = indices.len() / width;
        let indptr = (0..=rows).map(|r| r * width).collect();
        Csr { rows, cols, indptr, indices, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn transpose(&self) -> Csr {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for i in 0..self.cols {
            counts[i + 1] += counts[i];
        }
        let indptr = counts.clone();
        let mut next = counts;
        let mut indices = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let c = self.indices[k];
                let dst = next[c];
                next[c] += 1;
                indices[dst] = r;
                values[dst] = self.values[k];
            }
        }
        Csr { rows: self.cols, cols: self.rows, indptr, indices, values }
    }

    /// `out = self * x` where `x` is row-major `(cols, width)`.
    pub fn apply(&self, x: &[f64], width: usize) -> Vec<f64> {
        assert_eq!(x.len(), self.cols * width);
        let mut out = vec![0.0; self.rows * width];
        for r in 0..self.rows {
            let dst = &mut out[r * width..(r + 1) * width];
            for k in self.indptr[r]..self.indptr[r + 1] {
                let w = self.values[k];
                if w == 0.0 {
                    continue;
                }
                let c = self.indices[k];
                let src = &x[c * width..(c + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

/// A constant sparse linear map applied to the rows of a 2-D tensor.
///
/// Holds the matrix and (lazily) its transpose, so the adjoint used during
/// backpropagation is built at most once per matrix.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    fwd: Arc<Csr>,
    bwd: Arc<OnceLock<Arc<Csr>>>,
}

impl SparseMatrix {
    pub fn new(csr: Csr) -> SparseMatrix {
        SparseMatrix { fwd: Arc::new(csr), bwd: Arc::new(OnceLock::new()) }
    }

    pub fn csr(&self) -> &Csr {
        &self.fwd
    }

    pub fn rows(&self) -> usize {
        self.fwd.rows
    }

    pub fn cols(&self) -> usize {
        self.fwd.cols
    }

    pub fn transpose(&self) -> SparseMatrix {
        let t = self.bwd.get_or_init(|| Arc::new(self.fwd.transpose())).clone();
        let back = OnceLock::new();
        let _ = back.set(self.fwd.clone());
        SparseMatrix { fwd: t, bwd: Arc::new(back) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_twice_is_identity() {
        let m = Csr::from_rows(4, vec![vec![(0, 1.0), (3, 2.0)], vec![], vec![(1, -1.0), (3, 0.5)]]);
        assert_eq!(m.transpose().transpose(), m);
    }

    #[test]
    fn apply_matches_dense() {
        let m = Csr::from_rows(3, vec![vec![(0, 1.0), (2, 2.0)], vec![(1, 3.0)]]);
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = m.apply(&x, 2);
        assert_eq!(y, vec![1.0 + 10.0, 2.0 + 12.0, 9.0, 12.0]);
    }
}
