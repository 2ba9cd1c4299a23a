//! Parameterized layers built on the tape primitives.
//!
//! A layer owns its tensors; `forward` snapshots them onto the tape as named
//! parameter leaves, so after `backward` the optimizer can match gradients
//! to tensors by name. `visit_params` / `visit_buffers` enumerate state in a
//! stable order for optimization and checkpointing.
//!
//! Weight initialization is Kaiming-uniform over fan-in with ReLU gain:
//! U(-b, b) with b = sqrt(6 / fan_in). Biases start at zero; batch-norm
//! scale at one.

use super::rng::SeededRng;
use super::tape::{Mode, Tape, ValueId};
use super::tensor::Tensor;
use crate::Result;

/// Enumerates named state. `visit_params` must reach every trainable tensor
/// exactly once; `visit_buffers` covers non-trainable state (running stats).
pub trait Layer {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        let _ = (prefix, f);
    }
}

pub(crate) fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

// ── affine ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Affine {
    pub weight: Tensor, // [in, out]
    pub bias: Tensor,   // [out]
}

impl Affine {
    pub fn new(in_features: usize, out_features: usize, rng: &mut SeededRng) -> Self {
        Affine {
            weight: kaiming_uniform(&[in_features, out_features], in_features, rng),
            bias: Tensor::zeros(&[out_features]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: ValueId) -> Result<ValueId> {
        let w = tape.param(&format!("{prefix}.weight"), &self.weight);
        let b = tape.param(&format!("{prefix}.bias"), &self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }
}

impl Layer for Affine {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

// ── convolutions ───────────────────────────────────────────────────────

/// 1-D convolution without bias (a batch norm always follows it here).
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Tensor, // [c_out, c_in, k]
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize, rng: &mut SeededRng) -> Self {
        Conv1d {
            weight: kaiming_uniform(&[c_out, c_in, k], c_in * k, rng),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: ValueId) -> Result<ValueId> {
        let w = tape.param(&format!("{prefix}.weight"), &self.weight);
        tape.conv1d(x, w, self.stride, self.padding)
    }
}

impl Layer for Conv1d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.weight);
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor, // [c_out, c_in, k, k]
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize, rng: &mut SeededRng) -> Self {
        Conv2d {
            weight: kaiming_uniform(&[c_out, c_in, k, k], c_in * k * k, rng),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: ValueId) -> Result<ValueId> {
        let w = tape.param(&format!("{prefix}.weight"), &self.weight);
        tape.conv2d(x, w, self.stride, self.padding)
    }
}

impl Layer for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.weight);
    }
}

// ── batch norm ─────────────────────────────────────────────────────────

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over the channel axis. Train-mode forward normalizes
/// with batch statistics and folds them into the running estimates with
/// momentum 0.1 (the running variance update uses the unbiased estimate);
/// eval mode applies the running statistics as constants.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, prefix: &str, x: ValueId, mode: Mode) -> Result<ValueId> {
        let gamma = tape.param(&format!("{prefix}.gamma"), &self.gamma);
        let beta = tape.param(&format!("{prefix}.beta"), &self.beta);
        match mode {
            Mode::Train => {
                let (out, mean, var) = tape.batch_norm_train(x, gamma, beta, self.eps)?;
                let m = tape.value(x).numel() / self.gamma.numel();
                let unbias = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
                for c in 0..self.gamma.numel() {
                    let rm = &mut self.running_mean.data_mut()[c];
                    *rm = (1.0 - self.momentum) * *rm + self.momentum * mean[c];
                    let rv = &mut self.running_var.data_mut()[c];
                    *rv = (1.0 - self.momentum) * *rv + self.momentum * var[c] * unbias;
                }
                Ok(out)
            }
            Mode::Eval => tape.batch_norm_eval(
                x,
                gamma,
                beta,
                self.eps,
                self.running_mean.data(),
                self.running_var.data(),
            ),
        }
    }
}

impl Layer for BatchNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.running_mean"), &mut self.running_mean);
        f(format!("{prefix}.running_var"), &mut self.running_var);
    }
}
