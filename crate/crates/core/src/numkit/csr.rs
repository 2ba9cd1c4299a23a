//! Compressed sparse row matrix.
//!
//! Column indices are strictly increasing within each row, which makes the
//! representation canonical: equal matrices have equal buffers. Products
//! with dense tensors run in O(nnz * cols).

use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from row-sorted triplets; duplicate (row, col) pairs are a
    /// contract error.
    pub fn from_rows(n_rows: usize, n_cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if rows.len() != n_rows {
            return Err(Error::Contract(format!(
                "csr: got {} rows for a {}-row matrix",
                rows.len(),
                n_rows
            )));
        }
        let mut indptr = Vec::with_capacity(n_rows + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for (r, row) in rows.into_iter().enumerate() {
            let mut last: Option<usize> = None;
            for (c, v) in row {
                if c >= n_cols {
                    return Err(Error::Contract(format!(
                        "csr: column {} out of range in row {}",
                        c, r
                    )));
                }
                if let Some(p) = last {
                    if c <= p {
                        return Err(Error::Contract(format!(
                            "csr: columns in row {} must be strictly increasing",
                            r
                        )));
                    }
                }
                last = Some(c);
                indices.push(c);
                data.push(v);
            }
            indptr.push(indices.len());
        }
        Ok(CsrMatrix { n_rows, n_cols, indptr, indices, data })
    }

    /// Converts a dense matrix, keeping entries with |v| > threshold.
    pub fn from_dense(m: &Tensor, threshold: f64) -> Result<Self> {
        if m.ndim() != 2 {
            return Err(Error::contract("csr: from_dense needs a 2-D tensor"));
        }
        let (r, c) = (m.shape()[0], m.shape()[1]);
        let mut rows = Vec::with_capacity(r);
        for i in 0..r {
            let mut row = Vec::new();
            for j in 0..c {
                let v = m.at2(i, j);
                if v.abs() > threshold {
                    row.push((j, v));
                }
            }
            rows.push(row);
        }
        CsrMatrix::from_rows(r, c, rows)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    /// (column, value) pairs of one row.
    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.indptr[r];
        let hi = self.indptr[r + 1];
        self.indices[lo..hi].iter().copied().zip(self.data[lo..hi].iter().copied())
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.indptr[r + 1] - self.indptr[r]
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.n_rows, self.n_cols]);
        for r in 0..self.n_rows {
            for (c, v) in self.row_entries(r) {
                out.set2(r, c, v);
            }
        }
        out
    }

    /// `self @ x` for a dense 2-D `x`.
    pub fn matmul_dense(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 2 || x.shape()[0] != self.n_cols {
            return Err(Error::ShapeMismatch {
                op: "csr_matmul",
                lhs: vec![self.n_rows, self.n_cols],
                rhs: x.shape().to_vec(),
            });
        }
        let f = x.shape()[1];
        let mut out = vec![0.0; self.n_rows * f];
        let xd = x.data();
        for r in 0..self.n_rows {
            let or = &mut out[r * f..(r + 1) * f];
            for (c, v) in self.row_entries(r) {
                let xr = &xd[c * f..(c + 1) * f];
                for j in 0..f {
                    or[j] += v * xr[j];
                }
            }
        }
        Tensor::from_vec(&[self.n_rows, f], out)
    }

    /// `self^T @ x` without materializing the transpose.
    pub fn transpose_matmul_dense(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 2 || x.shape()[0] != self.n_rows {
            return Err(Error::ShapeMismatch {
                op: "csr_t_matmul",
                lhs: vec![self.n_cols, self.n_rows],
                rhs: x.shape().to_vec(),
            });
        }
        let f = x.shape()[1];
        let mut out = vec![0.0; self.n_cols * f];
        let xd = x.data();
        for r in 0..self.n_rows {
            let xr = &xd[r * f..(r + 1) * f];
            for (c, v) in self.row_entries(r) {
                let or = &mut out[c * f..(c + 1) * f];
                for j in 0..f {
                    or[j] += v * xr[j];
                }
            }
        }
        Tensor::from_vec(&[self.n_cols, f], out)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.n_rows != self.n_cols {
            return false;
        }
        for r in 0..self.n_rows {
            for (c, v) in self.row_entries(r) {
                let vt = self.get(c, r);
                if (v - vt).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let lo = self.indptr[r];
        let hi = self.indptr[r + 1];
        match self.indices[lo..hi].binary_search(&c) {
            Ok(pos) => self.data[lo + pos],
            Err(_) => 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_round_trip() {
        let m = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 2.0, 0.0, 0.0, 3.0]).unwrap();
        let csr = CsrMatrix::from_dense(&m, 0.0).unwrap();
        assert_eq!(csr.nnz(), 3);
        assert_eq!(csr.to_dense(), m);
        assert_eq!(csr.get(0, 2), 2.0);
        assert_eq!(csr.get(1, 0), 0.0);
    }

    #[test]
    fn matmul_matches_dense_product() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 2.0, 0.0, 3.0, 0.0]).unwrap();
        let x = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let csr = CsrMatrix::from_dense(&a, 0.0).unwrap();
        let y = csr.matmul_dense(&x).unwrap();
        assert_eq!(y.data(), &[11.0, 14.0, 9.0, 12.0]);
        let yt = csr.transpose_matmul_dense(&Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(yt.data(), &[1.0, 3.0, 2.0]);
    }

    #[test]
    fn unsorted_columns_rejected() {
        let err = CsrMatrix::from_rows(1, 3, vec![vec![(2, 1.0), (0, 1.0)]]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
