//! Feature-space graph construction and graph convolution.
//!
//! Nodes are samples; edges come from a k-nearest-neighbor search over
//! encoder outputs, OR-symmetrized into a binary adjacency `A` with zero
//! diagonal. Propagation uses the self-loop-normalized operator
//! `Â = D̃^{-1/2} (A + I) D̃^{-1/2}`, and each layer computes
//! `ReLU(BN(Â · H · W + bias))`.
//!
//! Nearest-neighbor ties break toward the lower node index, so a given
//! feature matrix always yields the same graph.

use std::sync::Arc;

use crate::numkit::layers::kaiming_uniform;
use crate::numkit::{BatchNorm, CsrMatrix, Layer, Mode, SeededRng, Tape, Tensor, ValueId};
use crate::{Error, Result};

/// Pairwise Euclidean distances between the rows of `z` (shape `[n, f]`).
/// The result is a symmetric `[n, n]` matrix with zero diagonal.
pub fn distance_matrix(z: &Tensor) -> Result<Tensor> {
    if z.ndim() != 2 {
        return Err(Error::contract(format!(
            "distance_matrix expects a 2-d feature matrix, got shape {:?}",
            z.shape()
        )));
    }
    z.check_finite("distance_matrix")?;
    let n = z.shape()[0];
    let f = z.shape()[1];
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let zi = z.row(i);
        for j in (i + 1)..n {
            let zj = z.row(j);
            let mut s = 0.0;
            for c in 0..f {
                let d = zi[c] - zj[c];
                s += d * d;
            }
            let d = s.sqrt();
            out.set2(i, j, d);
            out.set2(j, i, d);
        }
    }
    Ok(out)
}

/// Binary kNN adjacency from a full distance matrix: each node links to its
/// `k` nearest others (self excluded, ties toward the lower index), and the
/// directed selections are OR-symmetrized. Entries are 1.0; diagonal is zero.
pub fn knn_adjacency(dis: &Tensor, k: usize) -> Result<CsrMatrix> {
    if dis.ndim() != 2 || dis.shape()[0] != dis.shape()[1] {
        return Err(Error::contract(format!(
            "knn_adjacency expects a square distance matrix, got shape {:?}",
            dis.shape()
        )));
    }
    dis.check_finite("knn_adjacency")?;
    let n = dis.shape()[0];
    if n < 2 {
        return Err(Error::contract("knn_adjacency needs at least 2 nodes"));
    }
    if k == 0 || k >= n {
        return Err(Error::contract(format!(
            "neighbor count k = {k} must satisfy 1 <= k <= n - 1 = {}",
            n - 1
        )));
    }

    let mut selected = vec![false; n * n];
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        candidates.clear();
        candidates.extend((0..n).filter(|&j| j != i).map(|j| (dis.at2(i, j), j)));
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in candidates.iter().take(k) {
            selected[i * n + j] = true;
        }
    }

    let rows = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| selected[i * n + j] || selected[j * n + i])
                .map(|j| (j, 1.0))
                .collect()
        })
        .collect();
    CsrMatrix::from_rows(n, n, rows)
}

/// Symmetric normalization with self-loops: `Â = D̃^{-1/2} (A + I) D̃^{-1/2}`
/// where `D̃` is the diagonal of row sums of `A + I`. An isolated node keeps
/// only its self-loop and gets `Â_ii = 1`.
pub fn normalize_adjacency(a: &CsrMatrix) -> Result<CsrMatrix> {
    if a.n_rows() != a.n_cols() {
        return Err(Error::contract(format!(
            "normalize_adjacency expects a square matrix, got {}x{}",
            a.n_rows(),
            a.n_cols()
        )));
    }
    let n = a.n_rows();
    for i in 0..n {
        if a.get(i, i) != 0.0 {
            return Err(Error::contract(format!(
                "adjacency already has a self-loop at node {i}; expected zero diagonal"
            )));
        }
    }

    let deg: Vec<f64> = (0..n)
        .map(|i| 1.0 + a.row_entries(i).map(|(_, v)| v).sum::<f64>())
        .collect();

    // One sqrt per entry of the degree product keeps symmetric pairs
    // bit-identical and simple cases (all degrees equal) exact.
    let rows = (0..n)
        .map(|i| {
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(a.row_nnz(i) + 1);
            let mut self_loop_placed = false;
            for (j, v) in a.row_entries(i) {
                if !self_loop_placed && j > i {
                    row.push((i, 1.0 / deg[i]));
                    self_loop_placed = true;
                }
                row.push((j, v / (deg[i] * deg[j]).sqrt()));
            }
            if !self_loop_placed {
                row.push((i, 1.0 / deg[i]));
            }
            row
        })
        .collect();
    CsrMatrix::from_rows(n, n, rows)
}

/// A node graph: the raw binary adjacency and its normalized propagation
/// operator, both sparse and shared (`Arc`) so tapes can hold them cheaply.
#[derive(Debug, Clone)]
pub struct GraphData {
    pub n_nodes: usize,
    pub adjacency: Arc<CsrMatrix>,
    pub normalized: Arc<CsrMatrix>,
    pub k_used: usize,
}

impl GraphData {
    pub fn from_features(z: &Tensor, k: usize) -> Result<GraphData> {
        let dis = distance_matrix(z)?;
        GraphData::from_distances(&dis, k)
    }

    pub fn from_distances(dis: &Tensor, k: usize) -> Result<GraphData> {
        let adjacency = knn_adjacency(dis, k)?;
        debug_assert!(adjacency.is_symmetric(0.0));
        debug_assert!((0..adjacency.n_rows()).all(|i| adjacency.row_nnz(i) >= k));
        let normalized = normalize_adjacency(&adjacency)?;
        Ok(GraphData {
            n_nodes: adjacency.n_rows(),
            adjacency: Arc::new(adjacency),
            normalized: Arc::new(normalized),
            k_used: k,
        })
    }

    /// Textual edge dump for debugging: one `"i j"` line per undirected edge
    /// with `i < j`, ordered by `(i, j)`.
    pub fn edge_list(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n_nodes {
            for (j, _) in self.adjacency.row_entries(i) {
                if i < j {
                    out.push_str(&format!("{i} {j}\n"));
                }
            }
        }
        out
    }
}

// ── graph convolution ──────────────────────────────────────────────────

/// One graph convolution layer: `ReLU(BN(Â · H · W + bias))`.
#[derive(Debug, Clone)]
pub struct GcnLayer {
    pub weight: Tensor, // [f_in, f_out]
    pub bias: Tensor,   // [f_out]
    pub bn: BatchNorm,
}

impl GcnLayer {
    pub fn new(f_in: usize, f_out: usize, rng: &mut SeededRng) -> Self {
        GcnLayer {
            weight: kaiming_uniform(&[f_in, f_out], f_in, rng),
            bias: Tensor::zeros(&[f_out]),
            bn: BatchNorm::new(f_out),
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        prefix: &str,
        a_hat: &Arc<CsrMatrix>,
        h: ValueId,
        mode: Mode,
    ) -> Result<ValueId> {
        let w = tape.param(&format!("{prefix}.weight"), &self.weight);
        let b = tape.param(&format!("{prefix}.bias"), &self.bias);
        let hw = tape.matmul(h, w)?;
        let agg = tape.sp_mm(Arc::clone(a_hat), hw)?;
        let biased = tape.add_bias(agg, b)?;
        let normed = self.bn.forward(tape, &format!("{prefix}.bn"), biased, mode)?;
        tape.relu(normed)
    }
}

impl Layer for GcnLayer {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
        self.bn.visit_params(&format!("{prefix}.bn"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.bn.visit_buffers(&format!("{prefix}.bn"), f);
    }
}

/// A stack of [`GcnLayer`]s sharing one propagation operator. Zero layers
/// make the branch the identity, which keeps ablation plumbing uniform.
#[derive(Debug, Clone)]
pub struct GcnBranch {
    pub layers: Vec<GcnLayer>,
}

impl GcnBranch {
    /// `widths` lists each layer's output width in order; the first layer
    /// consumes `input_dim` features.
    pub fn new(input_dim: usize, widths: &[usize], rng: &mut SeededRng) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut f_in = input_dim;
        for &f_out in widths {
            layers.push(GcnLayer::new(f_in, f_out, rng));
            f_in = f_out;
        }
        GcnBranch { layers }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        self.layers.last().map_or(input_dim, |l| l.weight.shape()[1])
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        prefix: &str,
        a_hat: &Arc<CsrMatrix>,
        z: ValueId,
        mode: Mode,
    ) -> Result<ValueId> {
        let mut h = z;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            h = layer.forward(tape, &format!("{prefix}.{i}"), a_hat, h, mode)?;
        }
        Ok(h)
    }
}

impl Layer for GcnBranch {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&format!("{prefix}.{i}"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_buffers(&format!("{prefix}.{i}"), f);
        }
    }
}
