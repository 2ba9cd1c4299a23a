//! Principal component analysis via a cyclic Jacobi eigensolver.
//!
//! Components are the top eigenvectors of the sample covariance (divisor
//! N - 1) of mean-centered spectra. The sign of each component is fixed by
//! making its largest-magnitude entry positive (first such index on ties),
//! so fits are fully deterministic.

use crate::numkit::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    /// Per-band mean of the fitting data.
    pub mean: Vec<f64>,
    /// `[p, bands]`, orthonormal rows.
    pub components: Tensor,
    /// Covariance eigenvalues for the retained components, non-increasing.
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    /// Projects `[n, bands]` spectra to `[n, p]` scores.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        let bands = self.mean.len();
        if x.ndim() != 2 || x.shape()[1] != bands {
            return Err(Error::ShapeMismatch {
                op: "pca_project",
                lhs: x.shape().to_vec(),
                rhs: vec![bands],
            });
        }
        let n = x.shape()[0];
        let p = self.components.shape()[0];
        let comp = self.components.data();
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let row = x.row(i);
            for j in 0..p {
                let mut acc = 0.0;
                for b in 0..bands {
                    acc += (row[b] - self.mean[b]) * comp[j * bands + b];
                }
                out[i * p + j] = acc;
            }
        }
        Tensor::from_vec(&[n, p], out)
    }
}

/// Fits on `[n, bands]` pixel spectra, retaining `p` components.
pub fn fit_pca(pixels: &Tensor, p: usize) -> Result<PcaModel> {
    if pixels.ndim() != 2 {
        return Err(Error::contract("fit_pca: pixel matrix must be 2-D"));
    }
    let (n, bands) = (pixels.shape()[0], pixels.shape()[1]);
    if n < 2 {
        return Err(Error::contract("fit_pca: need at least 2 pixels"));
    }
    if p < 1 || p > bands.min(n) {
        return Err(Error::Contract(format!(
            "fit_pca: p = {} outside 1..=min(n = {}, bands = {})",
            p, n, bands
        )));
    }

    let mut mean = vec![0.0; bands];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(pixels.row(i)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }

    // Sample covariance of the centered data.
    let mut cov = vec![0.0; bands * bands];
    for i in 0..n {
        let row = pixels.row(i);
        for a in 0..bands {
            let da = row[a] - mean[a];
            for b in a..bands {
                cov[a * bands + b] += da * (row[b] - mean[b]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..bands {
        for b in a..bands {
            let v = cov[a * bands + b] / denom;
            cov[a * bands + b] = v;
            cov[b * bands + a] = v;
        }
    }

    let (eigvals, eigvecs) = jacobi_eigh(&Tensor::from_vec(&[bands, bands], cov)?)?;

    let mut components = vec![0.0; p * bands];
    let mut explained = Vec::with_capacity(p);
    for j in 0..p {
        explained.push(eigvals[j].max(0.0));
        // Column j of the eigenvector matrix, sign-fixed.
        let mut comp: Vec<f64> = (0..bands).map(|b| eigvecs.at2(b, j)).collect();
        let mut pivot = 0usize;
        for (i, v) in comp.iter().enumerate() {
            if v.abs() > comp[pivot].abs() {
                pivot = i;
            }
        }
        if comp[pivot] < 0.0 {
            for v in comp.iter_mut() {
                *v = -*v;
            }
        }
        components[j * bands..(j + 1) * bands].copy_from_slice(&comp);
    }

    Ok(PcaModel {
        mean,
        components: Tensor::from_vec(&[p, bands], components)?,
        explained_variance: explained,
    })
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in non-increasing order and the matching
/// eigenvectors as columns.
pub fn jacobi_eigh(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    if a.ndim() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::contract("jacobi_eigh: matrix must be square"));
    }
    let n = a.shape()[0];
    let mut m = a.data().to_vec();
    for r in 0..n {
        for c in r + 1..n {
            if (m[r * n + c] - m[c * n + r]).abs() > 1e-9 * (1.0 + m[r * n + c].abs()) {
                return Err(Error::contract("jacobi_eigh: matrix must be symmetric"));
            }
        }
    }
    let mut v = Tensor::eye(n).into_data();

    let frob: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * frob.max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for r in 0..n {
            for c in r + 1..n {
                off += m[r * n + c] * m[r * n + c];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= tol / n as f64 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..n {
                    let (mip, miq) = (m[i * n + p], m[i * n + q]);
                    m[i * n + p] = c * mip - s * miq;
                    m[i * n + q] = s * mip + c * miq;
                }
                for i in 0..n {
                    let (mpi, mqi) = (m[p * n + i], m[q * n + i]);
                    m[p * n + i] = c * mpi - s * mqi;
                    m[q * n + i] = s * mpi + c * mqi;
                }
                for i in 0..n {
                    let (vip, viq) = (v[i * n + p], v[i * n + q]);
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }

    // Sort eigenpairs by descending eigenvalue (index breaks exact ties).
    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    order.sort_by(|&a, &b| diag[b].partial_cmp(&diag[a]).unwrap().then(a.cmp(&b)));

    let eigvals: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            vecs[r * n + new_col] = v[r * n + old_col];
        }
    }
    Ok((eigvals, Tensor::from_vec(&[n, n], vecs)?))
}
