//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Forward math executes eagerly; each primitive appends one [`Op`] record.
//! [`Tape::backward`] seeds the scalar loss with 1.0 and replays the records
//! in reverse creation order (a valid reverse topological order, and the
//! same order every run), accumulating vector-Jacobian products into one
//! gradient slot per value. Shared subexpressions therefore sum their
//! contributions.
//!
//! Every primitive validates operand shapes and checks its output for
//! NaN/Inf; a non-finite result is a reported error, never a silent value.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::csr::CsrMatrix;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Index of a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ValueId(usize);

/// Train mode uses batch statistics (and the owning layer updates running
/// stats); eval mode treats stored running statistics as constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Matmul { a: ValueId, b: ValueId, out: ValueId },
    /// `a @ b^T` without materializing the transpose.
    MatmulNt { a: ValueId, b: ValueId, out: ValueId },
    Add { a: ValueId, b: ValueId, out: ValueId },
    Sub { a: ValueId, b: ValueId, out: ValueId },
    Scale { x: ValueId, factor: f64, out: ValueId },
    /// Row-broadcast bias: `[n, f] + [f]`.
    AddBias { x: ValueId, bias: ValueId, out: ValueId },
    Relu { x: ValueId, out: ValueId },
    Sigmoid { x: ValueId, out: ValueId },
    SoftmaxRows { x: ValueId, out: ValueId },
    LogSoftmaxRows { x: ValueId, out: ValueId },
    Conv1d { x: ValueId, w: ValueId, stride: usize, padding: usize, out: ValueId },
    Conv2d { x: ValueId, w: ValueId, stride: usize, padding: usize, out: ValueId },
    MaxPool1d { x: ValueId, argmax: Vec<usize>, out: ValueId },
    MaxPool2d { x: ValueId, argmax: Vec<usize>, out: ValueId },
    GlobalAvgPool { x: ValueId, out: ValueId },
    BatchNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        train: bool,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        out: ValueId,
    },
    /// `[n, c, ...spatial] * [n, c]` broadcast over the spatial axes.
    ChannelGate { x: ValueId, gate: ValueId, out: ValueId },
    ConcatCols { a: ValueId, b: ValueId, out: ValueId },
    GatherRows { x: ValueId, indices: Arc<Vec<usize>>, out: ValueId },
    /// Picks one column per row: `out[i] = x[i, cols[i]]`.
    PickPerRow { x: ValueId, cols: Arc<Vec<usize>>, out: ValueId },
    SumAll { x: ValueId, out: ValueId },
    MeanAll { x: ValueId, out: ValueId },
    L2NormalizeRows { x: ValueId, norms: Vec<f64>, out: ValueId },
    /// Per row `i`: `log(sum_{j in mask[i]} exp(s[i, j]))`.
    MaskedLseRows { s: ValueId, mask: Arc<Vec<Vec<usize>>>, out: ValueId },
    /// Sparse-dense product with a constant matrix: gradients flow into the
    /// dense operand only.
    SpMm { a: Arc<CsrMatrix>, h: ValueId, out: ValueId },
    Reshape { x: ValueId, out: ValueId },
}

impl Op {
    fn out(&self) -> ValueId {
        match self {
            Op::Matmul { out, .. }
            | Op::MatmulNt { out, .. }
            | Op::Add { out, .. }
            | Op::Sub { out, .. }
            | Op::Scale { out, .. }
            | Op::AddBias { out, .. }
            | Op::Relu { out, .. }
            | Op::Sigmoid { out, .. }
            | Op::SoftmaxRows { out, .. }
            | Op::LogSoftmaxRows { out, .. }
            | Op::Conv1d { out, .. }
            | Op::Conv2d { out, .. }
            | Op::MaxPool1d { out, .. }
            | Op::MaxPool2d { out, .. }
            | Op::GlobalAvgPool { out, .. }
            | Op::BatchNorm { out, .. }
            | Op::ChannelGate { out, .. }
            | Op::ConcatCols { out, .. }
            | Op::GatherRows { out, .. }
            | Op::PickPerRow { out, .. }
            | Op::SumAll { out, .. }
            | Op::MeanAll { out, .. }
            | Op::L2NormalizeRows { out, .. }
            | Op::MaskedLseRows { out, .. }
            | Op::SpMm { out, .. }
            | Op::Reshape { out, .. } => *out,
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    /// Named parameter leaves, deduplicated by name.
    bindings: BTreeMap<String, ValueId>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, t: Tensor) -> ValueId {
        self.values.push(t);
        ValueId(self.values.len() - 1)
    }

    /// Registers a differentiable leaf (tests read its gradient directly).
    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        self.push(t.clone())
    }

    /// Registers a non-learned input. Mechanically identical to [`leaf`];
    /// the name records intent at call sites.
    ///
    /// [`leaf`]: Tape::leaf
    pub fn constant(&mut self, t: &Tensor) -> ValueId {
        self.push(t.clone())
    }

    /// Registers a named parameter leaf; repeated names return the original
    /// id so a layer applied twice shares one gradient slot.
    pub fn param(&mut self, name: &str, t: &Tensor) -> ValueId {
        if let Some(&id) = self.bindings.get(name) {
            return id;
        }
        let id = self.push(t.clone());
        self.bindings.insert(name.to_string(), id);
        id
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.values[id.0]
    }

    fn shape(&self, id: ValueId) -> &[usize] {
        self.values[id.0].shape()
    }

    fn record(&mut self, out: Tensor, op_name: &'static str, make: impl FnOnce(ValueId) -> Op) -> Result<ValueId> {
        out.check_finite(op_name)?;
        let out_id = self.push(out);
        self.ops.push(make(out_id));
        Ok(out_id)
    }

    // ── primitive forward ops ──────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let out = matmul_raw(self.value(a), self.value(b), false);
        self.record(out, "matmul", |out| Op::Matmul { a, b, out })
    }

    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch { op: "matmul_nt", lhs: sa, rhs: sb });
        }
        let out = matmul_raw(self.value(a), self.value(b), true);
        self.record(out, "matmul_nt", |out| Op::MatmulNt { a, b, out })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        self.record(out, "add", |out| Op::Add { a, b, out })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "sub",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= v;
        }
        self.record(out, "sub", |out| Op::Sub { a, b, out })
    }

    pub fn scale(&mut self, x: ValueId, factor: f64) -> Result<ValueId> {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o *= factor;
        }
        self.record(out, "scale", |out| Op::Scale { x, factor, out })
    }

    pub fn add_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::ShapeMismatch { op: "add_bias", lhs: sx, rhs: sb });
        }
        let (n, f) = (sx[0], sx[1]);
        let mut out = self.value(x).clone();
        {
            let b = self.values[bias.0].data().to_vec();
            let od = out.data_mut();
            for i in 0..n {
                for j in 0..f {
                    od[i * f + j] += b[j];
                }
            }
        }
        self.record(out, "add_bias", |out| Op::AddBias { x, bias, out })
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            if *o < 0.0 {
                *o = 0.0;
            }
        }
        self.record(out, "relu", |out| Op::Relu { x, out })
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = sigmoid_scalar(*o);
        }
        self.record(out, "sigmoid", |out| Op::Sigmoid { x, out })
    }

    pub fn softmax_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "softmax_rows", lhs: s, rhs: vec![] });
        }
        let out = softmax_rows_raw(self.value(x), false);
        self.record(out, "softmax_rows", |out| Op::SoftmaxRows { x, out })
    }

    pub fn log_softmax_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "log_softmax_rows", lhs: s, rhs: vec![] });
        }
        let out = softmax_rows_raw(self.value(x), true);
        self.record(out, "log_softmax_rows", |out| Op::LogSoftmaxRows { x, out })
    }

    /// Cross-correlation over `[n, c_in, l]` with kernels `[c_out, c_in, k]`
    /// and zero padding.
    pub fn conv1d(&mut self, x: ValueId, w: ValueId, stride: usize, padding: usize) -> Result<ValueId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch { op: "conv1d", lhs: sx, rhs: sw });
        }
        if stride == 0 {
            return Err(Error::contract("conv1d: stride must be >= 1"));
        }
        let (l, k) = (sx[2], sw[2]);
        if l + 2 * padding < k {
            return Err(Error::Contract(format!(
                "conv1d: kernel {} exceeds padded length {}",
                k,
                l + 2 * padding
            )));
        }
        let out = conv1d_raw(self.value(x), self.value(w), stride, padding);
        self.record(out, "conv1d", |out| Op::Conv1d { x, w, stride, padding, out })
    }

    /// Cross-correlation over `[n, c_in, h, w]` with square kernels
    /// `[c_out, c_in, k, k]` and zero padding.
    pub fn conv2d(&mut self, x: ValueId, w: ValueId, stride: usize, padding: usize) -> Result<ValueId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw });
        }
        if stride == 0 {
            return Err(Error::contract("conv2d: stride must be >= 1"));
        }
        let k = sw[2];
        if sx[2] + 2 * padding < k || sx[3] + 2 * padding < k {
            return Err(Error::Contract(format!(
                "conv2d: kernel {} exceeds padded input {}x{} (padding {})",
                k, sx[2], sx[3], padding
            )));
        }
        let out = conv2d_raw(self.value(x), self.value(w), stride, padding);
        self.record(out, "conv2d", |out| Op::Conv2d { x, w, stride, padding, out })
    }

    /// Max pooling over the last axis of `[n, c, l]`; window ties resolve to
    /// the lowest index, which fixes where the gradient routes.
    pub fn max_pool1d(&mut self, x: ValueId, window: usize, stride: usize) -> Result<ValueId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::ShapeMismatch { op: "max_pool1d", lhs: sx, rhs: vec![] });
        }
        if window == 0 || stride == 0 || sx[2] < window {
            return Err(Error::Contract(format!(
                "max_pool1d: window {} / stride {} invalid for length {}",
                window, stride, sx[2]
            )));
        }
        let (n, c, l) = (sx[0], sx[1], sx[2]);
        let l_out = (l - window) / stride + 1;
        let xd = self.value(x).data();
        let mut data = vec![0.0; n * c * l_out];
        let mut argmax = vec![0usize; n * c * l_out];
        for nc in 0..n * c {
            let base = nc * l;
            for t in 0..l_out {
                let start = t * stride;
                let mut best = start;
                for j in start + 1..start + window {
                    if xd[base + j] > xd[base + best] {
                        best = j;
                    }
                }
                data[nc * l_out + t] = xd[base + best];
                argmax[nc * l_out + t] = base + best;
            }
        }
        let out = Tensor::from_vec(&[n, c, l_out], data)?;
        self.record(out, "max_pool1d", |out| Op::MaxPool1d { x, argmax, out })
    }

    /// Square-window max pooling over `[n, c, h, w]`; ties resolve to the
    /// lowest flat index within the window.
    pub fn max_pool2d(&mut self, x: ValueId, window: usize, stride: usize) -> Result<ValueId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::ShapeMismatch { op: "max_pool2d", lhs: sx, rhs: vec![] });
        }
        if window == 0 || stride == 0 || sx[2] < window || sx[3] < window {
            return Err(Error::Contract(format!(
                "max_pool2d: window {} / stride {} invalid for {}x{}",
                window, stride, sx[2], sx[3]
            )));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (h_out, w_out) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let xd = self.value(x).data();
        let mut data = vec![0.0; n * c * h_out * w_out];
        let mut argmax = vec![0usize; data.len()];
        for nc in 0..n * c {
            let base = nc * h * w;
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let mut best = base + oh * stride * w + ow * stride;
                    for kh in 0..window {
                        for kw in 0..window {
                            let idx = base + (oh * stride + kh) * w + ow * stride + kw;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    let o = nc * h_out * w_out + oh * w_out + ow;
                    data[o] = xd[best];
                    argmax[o] = best;
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, h_out, w_out], data)?;
        self.record(out, "max_pool2d", |out| Op::MaxPool2d { x, argmax, out })
    }

    /// Mean over all spatial axes: `[n, c, ...] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: ValueId) -> Result<ValueId> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 3 {
            return Err(Error::ShapeMismatch { op: "global_avg_pool", lhs: sx, rhs: vec![] });
        }
        let (n, c) = (sx[0], sx[1]);
        let spatial: usize = sx[2..].iter().product();
        let xd = self.value(x).data();
        let mut data = vec![0.0; n * c];
        for nc in 0..n * c {
            let mut acc = 0.0;
            for s in 0..spatial {
                acc += xd[nc * spatial + s];
            }
            data[nc] = acc / spatial as f64;
        }
        let out = Tensor::from_vec(&[n, c], data)?;
        self.record(out, "global_avg_pool", |out| Op::GlobalAvgPool { x, out })
    }

    /// Batch normalization over the channel axis (axis 1; for 2-D inputs the
    /// feature axis) using batch statistics. Returns the output id together
    /// with the per-channel batch mean and biased variance so the caller can
    /// maintain running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<(ValueId, Vec<f64>, Vec<f64>)> {
        let sx = self.shape(x).to_vec();
        let c = self.bn_check(&sx, gamma, beta)?;
        let m = sx.iter().product::<usize>() / c;
        if m < 2 {
            return Err(Error::contract(
                "batch_norm: train mode needs at least 2 samples per channel",
            ));
        }
        let (mean, var) = bn_batch_stats(self.value(x), c);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = bn_apply(self.value(x), self.value(gamma), self.value(beta), &mean, &inv_std, c);
        let id = self.record(out, "batch_norm", |out| Op::BatchNorm {
            x,
            gamma,
            beta,
            train: true,
            mean: mean.clone(),
            inv_std: inv_std.clone(),
            out,
        })?;
        Ok((id, mean, var))
    }

    /// Batch normalization with fixed (running) statistics; the statistics
    /// are constants for differentiation.
    pub fn batch_norm_eval(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<ValueId> {
        let sx = self.shape(x).to_vec();
        let c = self.bn_check(&sx, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: vec![c],
                rhs: vec![running_mean.len(), running_var.len()],
            });
        }
        let mean = running_mean.to_vec();
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = bn_apply(self.value(x), self.value(gamma), self.value(beta), &mean, &inv_std, c);
        self.record(out, "batch_norm", |out| Op::BatchNorm {
            x,
            gamma,
            beta,
            train: false,
            mean,
            inv_std,
            out,
        })
    }

    fn bn_check(&self, sx: &[usize], gamma: ValueId, beta: ValueId) -> Result<usize> {
        if sx.len() < 2 {
            return Err(Error::ShapeMismatch { op: "batch_norm", lhs: sx.to_vec(), rhs: vec![] });
        }
        let c = sx[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: sx.to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        Ok(c)
    }

    /// Per-(sample, channel) scaling: `out[n, c, ...] = x[n, c, ...] * gate[n, c]`.
    pub fn channel_gate(&mut self, x: ValueId, gate: ValueId) -> Result<ValueId> {
        let (sx, sg) = (self.shape(x).to_vec(), self.shape(gate).to_vec());
        if sx.len() < 3 || sg.len() != 2 || sg[0] != sx[0] || sg[1] != sx[1] {
            return Err(Error::ShapeMismatch { op: "channel_gate", lhs: sx, rhs: sg });
        }
        let spatial: usize = sx[2..].iter().product();
        let mut out = self.value(x).clone();
        {
            let g = self.values[gate.0].data().to_vec();
            let od = out.data_mut();
            for nc in 0..sx[0] * sx[1] {
                for s in 0..spatial {
                    od[nc * spatial + s] *= g[nc];
                }
            }
        }
        self.record(out, "channel_gate", |out| Op::ChannelGate { x, gate, out })
    }

    /// Column-wise concatenation of two 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::ShapeMismatch { op: "concat_cols", lhs: sa, rhs: sb });
        }
        let (n, fa, fb) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; n * (fa + fb)];
        for i in 0..n {
            data[i * (fa + fb)..i * (fa + fb) + fa].copy_from_slice(&ad[i * fa..(i + 1) * fa]);
            data[i * (fa + fb) + fa..(i + 1) * (fa + fb)].copy_from_slice(&bd[i * fb..(i + 1) * fb]);
        }
        let out = Tensor::from_vec(&[n, fa + fb], data)?;
        self.record(out, "concat_cols", |out| Op::ConcatCols { a, b, out })
    }

    /// Row selection (duplicates allowed; gradients of duplicates sum).
    pub fn gather_rows(&mut self, x: ValueId, indices: Arc<Vec<usize>>) -> Result<ValueId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::ShapeMismatch { op: "gather_rows", lhs: sx, rhs: vec![] });
        }
        let f = sx[1];
        let xd = self.value(x).data();
        let mut data = vec![0.0; indices.len() * f];
        for (r, &i) in indices.iter().enumerate() {
            if i >= sx[0] {
                return Err(Error::Contract(format!(
                    "gather_rows: index {} out of range for {} rows",
                    i, sx[0]
                )));
            }
            data[r * f..(r + 1) * f].copy_from_slice(&xd[i * f..(i + 1) * f]);
        }
        let out = Tensor::from_vec(&[indices.len(), f], data)?;
        self.record(out, "gather_rows", |out| Op::GatherRows { x, indices, out })
    }

    pub fn pick_per_row(&mut self, x: ValueId, cols: Arc<Vec<usize>>) -> Result<ValueId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || cols.len() != sx[0] {
            return Err(Error::ShapeMismatch { op: "pick_per_row", lhs: sx, rhs: vec![cols.len()] });
        }
        let f = sx[1];
        let xd = self.value(x).data();
        let mut data = vec![0.0; sx[0]];
        for (i, &c) in cols.iter().enumerate() {
            if c >= f {
                return Err(Error::Contract(format!(
                    "pick_per_row: column {} out of range for {} columns",
                    c, f
                )));
            }
            data[i] = xd[i * f + c];
        }
        let out = Tensor::from_vec(&[sx[0]], data)?;
        self.record(out, "pick_per_row", |out| Op::PickPerRow { x, cols, out })
    }

    pub fn sum_all(&mut self, x: ValueId) -> Result<ValueId> {
        let s: f64 = self.value(x).data().iter().sum();
        self.record(Tensor::scalar(s), "sum_all", |out| Op::SumAll { x, out })
    }

    pub fn mean_all(&mut self, x: ValueId) -> Result<ValueId> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::contract("mean_all: empty tensor"));
        }
        let s: f64 = self.value(x).data().iter().sum::<f64>() / n as f64;
        self.record(Tensor::scalar(s), "mean_all", |out| Op::MeanAll { x, out })
    }

    /// Scales each row of a 2-D tensor to unit Euclidean norm. A zero-norm
    /// row is a contract error (the downstream cosine is undefined).
    pub fn l2_normalize_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::ShapeMismatch { op: "l2_normalize_rows", lhs: sx, rhs: vec![] });
        }
        let (n, f) = (sx[0], sx[1]);
        let xd = self.value(x).data();
        let mut norms = vec![0.0; n];
        let mut data = vec![0.0; n * f];
        for i in 0..n {
            let row = &xd[i * f..(i + 1) * f];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 0.0 {
                return Err(Error::Contract(format!(
                    "l2_normalize_rows: row {} has zero norm",
                    i
                )));
            }
            norms[i] = norm;
            for j in 0..f {
                data[i * f + j] = row[j] / norm;
            }
        }
        let out = Tensor::from_vec(&[n, f], data)?;
        self.record(out, "l2_normalize_rows", |out| Op::L2NormalizeRows { x, norms, out })
    }

    /// Stabilized log-sum-exp per row over the masked column subset; every
    /// mask row must be non-empty.
    pub fn masked_lse_rows(&mut self, s: ValueId, mask: Arc<Vec<Vec<usize>>>) -> Result<ValueId> {
        let ss = self.shape(s).to_vec();
        if ss.len() != 2 || mask.len() != ss[0] {
            return Err(Error::ShapeMismatch { op: "masked_lse_rows", lhs: ss, rhs: vec![mask.len()] });
        }
        let (n, m) = (ss[0], ss[1]);
        let sd = self.value(s).data();
        let mut data = vec![0.0; n];
        for i in 0..n {
            let cols = &mask[i];
            if cols.is_empty() {
                return Err(Error::Contract(format!("masked_lse_rows: empty mask for row {}", i)));
            }
            let row = &sd[i * m..(i + 1) * m];
            let mut hi = f64::NEG_INFINITY;
            for &c in cols {
                if c >= m {
                    return Err(Error::Contract(format!(
                        "masked_lse_rows: column {} out of range for {} columns",
                        c, m
                    )));
                }
                hi = hi.max(row[c]);
            }
            let sum: f64 = cols.iter().map(|&c| (row[c] - hi).exp()).sum();
            data[i] = hi + sum.ln();
        }
        let out = Tensor::from_vec(&[n], data)?;
        self.record(out, "masked_lse_rows", |out| Op::MaskedLseRows { s, mask, out })
    }

    /// Product of a constant sparse matrix with a dense 2-D tensor.
    pub fn sp_mm(&mut self, a: Arc<CsrMatrix>, h: ValueId) -> Result<ValueId> {
        let sh = self.shape(h).to_vec();
        if sh.len() != 2 || a.n_cols() != sh[0] {
            return Err(Error::ShapeMismatch {
                op: "sp_mm",
                lhs: vec![a.n_rows(), a.n_cols()],
                rhs: sh,
            });
        }
        let out = a.matmul_dense(self.value(h))?;
        self.record(out, "sp_mm", |out| Op::SpMm { a, h, out })
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let out = self.value(x).reshaped(shape)?;
        self.record(out, "reshape", |out| Op::Reshape { x, out })
    }

    // ── reverse pass ───────────────────────────────────────────────────

    /// Seeds `d loss / d loss = 1` and replays every recorded op once in
    /// reverse creation order. Consumes the tape: a second call is an error.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.consumed {
            return Err(Error::contract("backward: tape already consumed; build a new tape"));
        }
        if self.shape(loss) != [1] {
            return Err(Error::Contract(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        self.grads = vec![None; self.values.len()];
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..self.ops.len()).rev() {
            let out = self.ops[i].out();
            let g = match &self.grads[out.0] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backward_op(i, &g)?;
        }
        Ok(())
    }

    /// Gradient of the loss with respect to a value; zeros when the loss
    /// does not depend on it (including after a skipped subtree).
    pub fn grad(&self, id: ValueId) -> Result<Tensor> {
        if !self.consumed {
            return Err(Error::contract("grad: call backward first"));
        }
        Ok(match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shape(id)),
        })
    }

    /// Gradients for all named parameters registered via [`Tape::param`].
    pub fn param_grads(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.bindings {
            out.insert(name.clone(), self.grad(id)?);
        }
        Ok(out)
    }

    fn accumulate(&mut self, id: ValueId, delta: Tensor) {
        match &mut self.grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backward_op(&mut self, op_index: usize, g: &Tensor) -> Result<()> {
        // Ops are read by index (not moved) so saved buffers stay in place.
        match &self.ops[op_index] {
            &Op::Matmul { a, b, out: _ } => {
                let da = matmul_raw(g, self.value(b), true); // g @ b^T
                let db = matmul_tn(self.value(a), g); // a^T @ g
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            &Op::MatmulNt { a, b, out: _ } => {
                let da = matmul_raw(g, self.value(b), false); // g @ b
                let db = matmul_tn(g, self.value(a)); // g^T @ a
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            &Op::Add { a, b, out: _ } => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            &Op::Sub { a, b, out: _ } => {
                let mut db = g.clone();
                for v in db.data_mut() {
                    *v = -*v;
                }
                self.accumulate(a, g.clone());
                self.accumulate(b, db);
            }
            &Op::Scale { x, factor, out: _ } => {
                let mut dx = g.clone();
                for v in dx.data_mut() {
                    *v *= factor;
                }
                self.accumulate(x, dx);
            }
            &Op::AddBias { x, bias, out: _ } => {
                let f = self.shape(bias)[0];
                let n = self.shape(x)[0];
                let mut db = vec![0.0; f];
                for i in 0..n {
                    for j in 0..f {
                        db[j] += g.data()[i * f + j];
                    }
                }
                self.accumulate(x, g.clone());
                self.accumulate(bias, Tensor::from_vec(&[f], db)?);
            }
            &Op::Relu { x, out: _ } => {
                let mut dx = g.clone();
                for (v, &xi) in dx.data_mut().iter_mut().zip(self.values[x.0].data()) {
                    if xi <= 0.0 {
                        *v = 0.0;
                    }
                }
                self.accumulate(x, dx);
            }
            &Op::Sigmoid { x, out } => {
                let mut dx = g.clone();
                for (v, &yi) in dx.data_mut().iter_mut().zip(self.values[out.0].data()) {
                    *v *= yi * (1.0 - yi);
                }
                self.accumulate(x, dx);
            }
            &Op::SoftmaxRows { x, out } => {
                let y = self.value(out);
                let (n, f) = (y.shape()[0], y.shape()[1]);
                let mut dx = vec![0.0; n * f];
                for i in 0..n {
                    let yr = &y.data()[i * f..(i + 1) * f];
                    let gr = &g.data()[i * f..(i + 1) * f];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..f {
                        dx[i * f + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(x, Tensor::from_vec(&[n, f], dx)?);
            }
            &Op::LogSoftmaxRows { x, out } => {
                let y = self.value(out);
                let (n, f) = (y.shape()[0], y.shape()[1]);
                let mut dx = vec![0.0; n * f];
                for i in 0..n {
                    let yr = &y.data()[i * f..(i + 1) * f];
                    let gr = &g.data()[i * f..(i + 1) * f];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..f {
                        dx[i * f + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.accumulate(x, Tensor::from_vec(&[n, f], dx)?);
            }
            &Op::Conv1d { x, w, stride, padding, out: _ } => {
                let (dx, dw) = conv1d_backward(self.value(x), self.value(w), g, stride, padding);
                self.accumulate(x, dx);
                self.accumulate(w, dw);
            }
            &Op::Conv2d { x, w, stride, padding, out: _ } => {
                let (dx, dw) = conv2d_backward(self.value(x), self.value(w), g, stride, padding);
                self.accumulate(x, dx);
                self.accumulate(w, dw);
            }
            Op::MaxPool1d { x, argmax, out: _ } | Op::MaxPool2d { x, argmax, out: _ } => {
                let x = *x;
                let mut dx = Tensor::zeros(self.shape(x));
                for (o, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src] += g.data()[o];
                }
                self.accumulate(x, dx);
            }
            &Op::GlobalAvgPool { x, out: _ } => {
                let sx = self.shape(x).to_vec();
                let spatial: usize = sx[2..].iter().product();
                let mut dx = Tensor::zeros(&sx);
                for nc in 0..sx[0] * sx[1] {
                    let gv = g.data()[nc] / spatial as f64;
                    for s in 0..spatial {
                        dx.data_mut()[nc * spatial + s] = gv;
                    }
                }
                self.accumulate(x, dx);
            }
            Op::BatchNorm { x, gamma, beta, train, mean, inv_std, out: _ } => {
                let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                let (dx, dgamma, dbeta) = bn_backward(
                    self.value(x),
                    self.value(gamma),
                    g,
                    mean,
                    inv_std,
                    train,
                );
                self.accumulate(x, dx);
                self.accumulate(gamma, dgamma);
                self.accumulate(beta, dbeta);
            }
            &Op::ChannelGate { x, gate, out: _ } => {
                let sx = self.shape(x).to_vec();
                let spatial: usize = sx[2..].iter().product();
                let xd = self.value(x).data();
                let gated = self.value(gate).data();
                let mut dx = vec![0.0; xd.len()];
                let mut dgate = vec![0.0; gated.len()];
                for nc in 0..sx[0] * sx[1] {
                    for s in 0..spatial {
                        let gi = g.data()[nc * spatial + s];
                        dx[nc * spatial + s] = gi * gated[nc];
                        dgate[nc] += gi * xd[nc * spatial + s];
                    }
                }
                self.accumulate(x, Tensor::from_vec(&sx, dx)?);
                self.accumulate(gate, Tensor::from_vec(&[sx[0], sx[1]], dgate)?);
            }
            &Op::ConcatCols { a, b, out: _ } => {
                let (fa, fb) = (self.shape(a)[1], self.shape(b)[1]);
                let n = self.shape(a)[0];
                let mut da = vec![0.0; n * fa];
                let mut db = vec![0.0; n * fb];
                for i in 0..n {
                    let gr = &g.data()[i * (fa + fb)..(i + 1) * (fa + fb)];
                    da[i * fa..(i + 1) * fa].copy_from_slice(&gr[..fa]);
                    db[i * fb..(i + 1) * fb].copy_from_slice(&gr[fa..]);
                }
                self.accumulate(a, Tensor::from_vec(&[n, fa], da)?);
                self.accumulate(b, Tensor::from_vec(&[n, fb], db)?);
            }
            Op::GatherRows { x, indices, out: _ } => {
                let x = *x;
                let f = self.shape(x)[1];
                let mut dx = Tensor::zeros(self.shape(x));
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..f {
                        dx.data_mut()[i * f + j] += g.data()[r * f + j];
                    }
                }
                self.accumulate(x, dx);
            }
            Op::PickPerRow { x, cols, out: _ } => {
                let x = *x;
                let f = self.shape(x)[1];
                let mut dx = Tensor::zeros(self.shape(x));
                for (i, &c) in cols.iter().enumerate() {
                    dx.data_mut()[i * f + c] += g.data()[i];
                }
                self.accumulate(x, dx);
            }
            &Op::SumAll { x, out: _ } => {
                let gv = g.data()[0];
                self.accumulate(x, Tensor::full(self.shape(x), gv));
            }
            &Op::MeanAll { x, out: _ } => {
                let n = self.value(x).numel();
                let gv = g.data()[0] / n as f64;
                self.accumulate(x, Tensor::full(self.shape(x), gv));
            }
            Op::L2NormalizeRows { x, norms, out } => {
                let (x, out) = (*x, *out);
                let y = self.value(out);
                let (n, f) = (y.shape()[0], y.shape()[1]);
                let mut dx = vec![0.0; n * f];
                for i in 0..n {
                    let yr = &y.data()[i * f..(i + 1) * f];
                    let gr = &g.data()[i * f..(i + 1) * f];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..f {
                        dx[i * f + j] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                self.accumulate(x, Tensor::from_vec(&[n, f], dx)?);
            }
            Op::MaskedLseRows { s, mask, out } => {
                let (s, out) = (*s, *out);
                let (n, m) = (self.shape(s)[0], self.shape(s)[1]);
                let sd = self.value(s).data();
                let lse = self.value(out).data();
                let mut ds = vec![0.0; n * m];
                for i in 0..n {
                    for &c in &mask[i] {
                        ds[i * m + c] += g.data()[i] * (sd[i * m + c] - lse[i]).exp();
                    }
                }
                self.accumulate(s, Tensor::from_vec(&[n, m], ds)?);
            }
            Op::SpMm { a, h, out: _ } => {
                let h = *h;
                let dh = a.transpose_matmul_dense(g)?;
                self.accumulate(h, dh);
            }
            &Op::Reshape { x, out: _ } => {
                let dx = g.reshaped(self.shape(x))?;
                self.accumulate(x, dx);
            }
        }
        Ok(())
    }
}

// ── raw kernels ────────────────────────────────────────────────────────

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `a @ b` (or `a @ b^T` when `bt`); shapes pre-validated by the caller.
fn matmul_raw(a: &Tensor, b: &Tensor, bt: bool) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = if bt { b.shape()[0] } else { b.shape()[1] };
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    if bt {
        // out[i][j] = sum_k a[i][k] * b[j][k]: both operands row-contiguous.
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &bd[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for t in 0..k {
                    acc += ar[t] * br[t];
                }
                out[i * n + j] = acc;
            }
        }
    } else {
        for i in 0..m {
            let or = &mut out[i * n..(i + 1) * n];
            for t in 0..k {
                let av = ad[i * k + t];
                if av == 0.0 {
                    continue;
                }
                let br = &bd[t * n..(t + 1) * n];
                for j in 0..n {
                    or[j] += av * br[j];
                }
            }
        }
    }
    Tensor::from_vec(&[m, n], out).expect("matmul output shape")
}

/// `a^T @ b` for `a: [m, k], b: [m, n]`.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; k * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        for t in 0..k {
            let av = ad[i * k + t];
            if av == 0.0 {
                continue;
            }
            let br = &bd[i * n..(i + 1) * n];
            let or = &mut out[t * n..(t + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
    Tensor::from_vec(&[k, n], out).expect("matmul_tn output shape")
}

/// Row-stabilized softmax; with `log` the log-softmax instead.
fn softmax_rows_raw(x: &Tensor, log: bool) -> Tensor {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; n * f];
    for i in 0..n {
        let row = &x.data()[i * f..(i + 1) * f];
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..f {
            sum += (row[j] - hi).exp();
        }
        if log {
            let lse = hi + sum.ln();
            for j in 0..f {
                out[i * f + j] = row[j] - lse;
            }
        } else {
            for j in 0..f {
                out[i * f + j] = (row[j] - hi).exp() / sum;
            }
        }
    }
    Tensor::from_vec(&[n, f], out).expect("softmax output shape")
}

fn conv1d_raw(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Tensor {
    let (n, ci, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let l_out = (l + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0; n * co * l_out];
    let (xd, wd) = (x.data(), w.data());
    for ni in 0..n {
        for oc in 0..co {
            let or = &mut out[(ni * co + oc) * l_out..(ni * co + oc + 1) * l_out];
            for ic in 0..ci {
                let xr = &xd[(ni * ci + ic) * l..(ni * ci + ic + 1) * l];
                let wr = &wd[(oc * ci + ic) * k..(oc * ci + ic + 1) * k];
                for t in 0..l_out {
                    let mut acc = 0.0;
                    for j in 0..k {
                        let pos = t * stride + j;
                        if pos >= padding && pos - padding < l {
                            acc += xr[pos - padding] * wr[j];
                        }
                    }
                    or[t] += acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, co, l_out], out).expect("conv1d output shape")
}

fn conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    padding: usize,
) -> (Tensor, Tensor) {
    let (n, ci, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let l_out = g.shape()[2];
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; w.numel()];
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    for ni in 0..n {
        for oc in 0..co {
            let gr = &gd[(ni * co + oc) * l_out..(ni * co + oc + 1) * l_out];
            for ic in 0..ci {
                let xr = &xd[(ni * ci + ic) * l..(ni * ci + ic + 1) * l];
                let wr = &wd[(oc * ci + ic) * k..(oc * ci + ic + 1) * k];
                let dxr = &mut dx[(ni * ci + ic) * l..(ni * ci + ic + 1) * l];
                let dwr_base = (oc * ci + ic) * k;
                for t in 0..l_out {
                    let gv = gr[t];
                    if gv == 0.0 {
                        continue;
                    }
                    for j in 0..k {
                        let pos = t * stride + j;
                        if pos >= padding && pos - padding < l {
                            dxr[pos - padding] += gv * wr[j];
                            dw[dwr_base + j] += gv * xr[pos - padding];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(x.shape(), dx).expect("conv1d dx shape"),
        Tensor::from_vec(w.shape(), dw).expect("conv1d dw shape"),
    )
}

fn conv2d_raw(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Tensor {
    let (n, ci, h, wd_) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let h_out = (h + 2 * padding - k) / stride + 1;
    let w_out = (wd_ + 2 * padding - k) / stride + 1;
    let mut out = vec![0.0; n * co * h_out * w_out];
    let (xd, wd) = (x.data(), w.data());
    for ni in 0..n {
        for oc in 0..co {
            let ob = (ni * co + oc) * h_out * w_out;
            for ic in 0..ci {
                let xb = (ni * ci + ic) * h * wd_;
                let wb = (oc * ci + ic) * k * k;
                for oh in 0..h_out {
                    for kh in 0..k {
                        let ih = oh * stride + kh;
                        if ih < padding || ih - padding >= h {
                            continue;
                        }
                        let xrow = &xd[xb + (ih - padding) * wd_..xb + (ih - padding + 1) * wd_];
                        let wrow = &wd[wb + kh * k..wb + (kh + 1) * k];
                        let orow = &mut out[ob + oh * w_out..ob + (oh + 1) * w_out];
                        for ow in 0..w_out {
                            let mut acc = 0.0;
                            for kw in 0..k {
                                let iw = ow * stride + kw;
                                if iw >= padding && iw - padding < wd_ {
                                    acc += xrow[iw - padding] * wrow[kw];
                                }
                            }
                            orow[ow] += acc;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, co, h_out, w_out], out).expect("conv2d output shape")
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    padding: usize,
) -> (Tensor, Tensor) {
    let (n, ci, h, wd_) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let (h_out, w_out) = (g.shape()[2], g.shape()[3]);
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; w.numel()];
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    for ni in 0..n {
        for oc in 0..co {
            let gb = (ni * co + oc) * h_out * w_out;
            for ic in 0..ci {
                let xb = (ni * ci + ic) * h * wd_;
                let wb = (oc * ci + ic) * k * k;
                for oh in 0..h_out {
                    for kh in 0..k {
                        let ih = oh * stride + kh;
                        if ih < padding || ih - padding >= h {
                            continue;
                        }
                        let xrow_base = xb + (ih - padding) * wd_;
                        let grow = &gd[gb + oh * w_out..gb + (oh + 1) * w_out];
                        for ow in 0..w_out {
                            let gv = grow[ow];
                            if gv == 0.0 {
                                continue;
                            }
                            for kw in 0..k {
                                let iw = ow * stride + kw;
                                if iw >= padding && iw - padding < wd_ {
                                    dx[xrow_base + iw - padding] += gv * wd[wb + kh * k + kw];
                                    dw[wb + kh * k + kw] += gv * xd[xrow_base + iw - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(x.shape(), dx).expect("conv2d dx shape"),
        Tensor::from_vec(w.shape(), dw).expect("conv2d dw shape"),
    )
}

/// Per-channel mean and biased variance over all non-channel axes.
fn bn_batch_stats(x: &Tensor, c: usize) -> (Vec<f64>, Vec<f64>) {
    let n = x.shape()[0];
    let spatial: usize = x.shape()[2..].iter().product();
    let m = (n * spatial) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let xd = x.data();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * spatial;
            for s in 0..spatial {
                mean[ci] += xd[base + s];
            }
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * spatial;
            for s in 0..spatial {
                let d = xd[base + s] - mean[ci];
                var[ci] += d * d;
            }
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    (mean, var)
}

fn bn_apply(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    c: usize,
) -> Tensor {
    let n = x.shape()[0];
    let spatial: usize = x.shape()[2..].iter().product();
    let mut out = x.clone();
    let (gd, bd) = (gamma.data(), beta.data());
    let od = out.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * spatial;
            for s in 0..spatial {
                od[base + s] = gd[ci] * (od[base + s] - mean[ci]) * inv_std[ci] + bd[ci];
            }
        }
    }
    out
}

fn bn_backward(
    x: &Tensor,
    gamma: &Tensor,
    g: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    train: bool,
) -> (Tensor, Tensor, Tensor) {
    let n = x.shape()[0];
    let c = x.shape()[1];
    let spatial: usize = x.shape()[2..].iter().product();
    let m = (n * spatial) as f64;
    let (xd, gd, grad) = (x.data(), gamma.data(), g.data());

    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut gsum = vec![0.0; c]; // sum of incoming grads per channel
    let mut gxhat = vec![0.0; c]; // sum of grad * xhat per channel
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * spatial;
            for s in 0..spatial {
                let xhat = (xd[base + s] - mean[ci]) * inv_std[ci];
                let gv = grad[base + s];
                dgamma[ci] += gv * xhat;
                dbeta[ci] += gv;
                gsum[ci] += gv;
                gxhat[ci] += gv * xhat;
            }
        }
    }

    let mut dx = vec![0.0; x.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * spatial;
            let scale = gd[ci] * inv_std[ci];
            for s in 0..spatial {
                let gv = grad[base + s];
                dx[base + s] = if train {
                    let xhat = (xd[base + s] - mean[ci]) * inv_std[ci];
                    scale * (gv - gsum[ci] / m - xhat * gxhat[ci] / m)
                } else {
                    scale * gv
                };
            }
        }
    }
    (
        Tensor::from_vec(x.shape(), dx).expect("bn dx shape"),
        Tensor::from_vec(&[c], dgamma).expect("bn dgamma shape"),
        Tensor::from_vec(&[c], dbeta).expect("bn dbeta shape"),
    )
}

/// Mask covering every column for each of `n` rows.
pub fn full_mask(n: usize, m: usize) -> Vec<Vec<usize>> {
    vec![(0..m).collect(); n]
}
