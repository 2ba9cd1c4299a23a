//! Spectral and spatial feature encoders and their fusion.
//!
//! The spectral stream runs a small 1-D CNN over each sample's band vector;
//! the spatial stream runs a 2-D residual CNN with squeeze-and-excitation
//! channel gates over each sample's projected patch. `fuse` concatenates the
//! two embeddings (spatial columns first) into the joint feature matrix.
//!
//! Both encoders are per-sample functions in eval mode; train mode couples
//! samples only through batch-norm statistics.

use crate::dataio::TrainConfig;
use crate::numkit::{Affine, BatchNorm, Conv1d, Conv2d, Layer, Mode, SeededRng, Tape, Tensor, ValueId};
use crate::{Error, Result};

/// Architecture hyperparameters for both encoders. The defaults are the
/// canonical shapes used throughout: a 16→32 channel spectral CNN with
/// kernels 7 and 5, and a 32-channel stem followed by 32- and 64-channel
/// residual blocks on the spatial side.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub l_b: usize,
    pub l_p: usize,
    pub spectral_channels: [usize; 2],
    pub spectral_kernels: [usize; 2],
    pub stem_channels: usize,
    pub block_channels: [usize; 2],
    pub se_reduction: usize,
    pub use_se: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            l_b: 64,
            l_p: 64,
            spectral_channels: [16, 32],
            spectral_kernels: [7, 5],
            stem_channels: 32,
            block_channels: [32, 64],
            se_reduction: 8,
            use_se: true,
        }
    }
}

impl EncoderConfig {
    pub fn from_train_config(cfg: &TrainConfig) -> Self {
        EncoderConfig {
            l_b: cfg.l_b,
            l_p: cfg.l_p,
            use_se: !cfg.no_se,
            ..EncoderConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_b == 0 || self.l_p == 0 {
            return Err(Error::config("feature lengths l_b and l_p must be >= 1"));
        }
        for &c in self
            .spectral_channels
            .iter()
            .chain(self.block_channels.iter())
            .chain([&self.stem_channels])
        {
            if c == 0 {
                return Err(Error::config("channel counts must be >= 1"));
            }
        }
        for &k in &self.spectral_kernels {
            if k % 2 == 0 {
                return Err(Error::config(format!(
                    "spectral kernel sizes must be odd for symmetric padding, got {k}"
                )));
            }
        }
        if self.se_reduction == 0 {
            return Err(Error::config("se_reduction must be >= 1"));
        }
        if self.use_se {
            for &c in &self.block_channels {
                if c % self.se_reduction != 0 {
                    return Err(Error::config(format!(
                        "se_reduction = {} does not divide gated channel count {c}",
                        self.se_reduction
                    )));
                }
            }
        }
        Ok(())
    }
}

fn conv_out(len: usize, k: usize, padding: usize, stride: usize) -> usize {
    (len + 2 * padding - k) / stride + 1
}

// ── squeeze-and-excitation ─────────────────────────────────────────────

/// Channel attention: squeeze by global average pooling, excite through a
/// bottleneck MLP (C → C/r → C) with a sigmoid gate, then rescale each
/// channel of the input by its gate value.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub fc1: Affine,
    pub fc2: Affine,
}

impl SeBlock {
    pub fn new(channels: usize, reduction: usize, rng: &mut SeededRng) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(format!(
                "se reduction {reduction} must divide channel count {channels}"
            )));
        }
        let hidden = channels / reduction;
        Ok(SeBlock {
            fc1: Affine::new(channels, hidden, rng),
            fc2: Affine::new(hidden, channels, rng),
        })
    }

    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: ValueId) -> Result<ValueId> {
        let squeezed = tape.global_avg_pool(x)?;
        let a1 = self.fc1.forward(tape, &format!("{prefix}.fc1"), squeezed)?;
        let h = tape.relu(a1)?;
        let a2 = self.fc2.forward(tape, &format!("{prefix}.fc2"), h)?;
        let gate = tape.sigmoid(a2)?;
        tape.channel_gate(x, gate)
    }
}

impl Layer for SeBlock {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.fc1.visit_params(&format!("{prefix}.fc1"), f);
        self.fc2.visit_params(&format!("{prefix}.fc2"), f);
    }
}

// ── residual block ─────────────────────────────────────────────────────

/// Residual unit: conv3×3(stride)→BN→ReLU→conv3×3→BN→[SE], added to the
/// skip path (identity, or a 1×1 strided projection with BN when the shape
/// changes), then ReLU.
#[derive(Debug, Clone)]
pub struct SeResBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub se: Option<SeBlock>,
    pub skip: Option<(Conv2d, BatchNorm)>,
}

impl SeResBlock {
    pub fn new(
        c_in: usize,
        c_out: usize,
        stride: usize,
        use_se: bool,
        reduction: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let se = if use_se { Some(SeBlock::new(c_out, reduction, rng)?) } else { None };
        let skip = if c_in == c_out && stride == 1 {
            None
        } else {
            Some((Conv2d::new(c_in, c_out, 1, stride, 0, rng), BatchNorm::new(c_out)))
        };
        Ok(SeResBlock {
            conv1: Conv2d::new(c_in, c_out, 3, stride, 1, rng),
            bn1: BatchNorm::new(c_out),
            conv2: Conv2d::new(c_out, c_out, 3, 1, 1, rng),
            bn2: BatchNorm::new(c_out),
            se,
            skip,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, prefix: &str, x: ValueId, mode: Mode) -> Result<ValueId> {
        let mut p = self.conv1.forward(tape, &format!("{prefix}.conv1"), x)?;
        p = self.bn1.forward(tape, &format!("{prefix}.bn1"), p, mode)?;
        p = tape.relu(p)?;
        p = self.conv2.forward(tape, &format!("{prefix}.conv2"), p)?;
        p = self.bn2.forward(tape, &format!("{prefix}.bn2"), p, mode)?;
        if let Some(se) = &self.se {
            p = se.forward(tape, &format!("{prefix}.se"), p)?;
        }
        let s = match &mut self.skip {
            None => x,
            Some((conv, bn)) => {
                let projected = conv.forward(tape, &format!("{prefix}.skip_conv"), x)?;
                bn.forward(tape, &format!("{prefix}.skip_bn"), projected, mode)?
            }
        };
        let sum = tape.add(p, s)?;
        tape.relu(sum)
    }
}

impl Layer for SeResBlock {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.bn1.visit_params(&format!("{prefix}.bn1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.bn2.visit_params(&format!("{prefix}.bn2"), f);
        if let Some(se) = &mut self.se {
            se.visit_params(&format!("{prefix}.se"), f);
        }
        if let Some((conv, bn)) = &mut self.skip {
            conv.visit_params(&format!("{prefix}.skip_conv"), f);
            bn.visit_params(&format!("{prefix}.skip_bn"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.bn1.visit_buffers(&format!("{prefix}.bn1"), f);
        self.bn2.visit_buffers(&format!("{prefix}.bn2"), f);
        if let Some((_, bn)) = &mut self.skip {
            bn.visit_buffers(&format!("{prefix}.skip_bn"), f);
        }
    }
}

// ── spectral encoder ───────────────────────────────────────────────────

/// 1-D CNN over band vectors: conv(k₁)→BN→ReLU→maxpool(2,2)→conv(k₂)→BN→
/// ReLU→global average pool→affine to `l_b`.
#[derive(Debug, Clone)]
pub struct SpectralEncoder {
    pub conv1: Conv1d,
    pub bn1: BatchNorm,
    pub conv2: Conv1d,
    pub bn2: BatchNorm,
    pub head: Affine,
    bands: usize,
}

impl SpectralEncoder {
    pub fn new(cfg: &EncoderConfig, bands: usize, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let [c1, c2] = cfg.spectral_channels;
        let [k1, k2] = cfg.spectral_kernels;
        if bands < k1 {
            return Err(Error::config(format!(
                "spectral input length {bands} is smaller than the first kernel size {k1}"
            )));
        }
        if conv_out(bands, 2, 0, 2) == 0 {
            return Err(Error::config(format!(
                "spectral input length {bands} collapses to nothing under pooling"
            )));
        }
        Ok(SpectralEncoder {
            conv1: Conv1d::new(1, c1, k1, 1, k1 / 2, rng),
            bn1: BatchNorm::new(c1),
            conv2: Conv1d::new(c1, c2, k2, 1, k2 / 2, rng),
            bn2: BatchNorm::new(c2),
            head: Affine::new(c2, cfg.l_b, rng),
            bands,
        })
    }

    /// `x`: `[n, 1, bands]` → `[n, l_b]`.
    pub fn forward(&mut self, tape: &mut Tape, prefix: &str, x: ValueId, mode: Mode) -> Result<ValueId> {
        let sx = tape.value(x).shape().to_vec();
        if sx.len() != 3 || sx[1] != 1 || sx[2] != self.bands {
            return Err(Error::contract(format!(
                "spectral encoder expects [n, 1, {}], got {:?}",
                self.bands, sx
            )));
        }
        let mut h = self.conv1.forward(tape, &format!("{prefix}.conv1"), x)?;
        h = self.bn1.forward(tape, &format!("{prefix}.bn1"), h, mode)?;
        h = tape.relu(h)?;
        h = tape.max_pool1d(h, 2, 2)?;
        h = self.conv2.forward(tape, &format!("{prefix}.conv2"), h)?;
        h = self.bn2.forward(tape, &format!("{prefix}.bn2"), h, mode)?;
        h = tape.relu(h)?;
        h = tape.global_avg_pool(h)?;
        self.head.forward(tape, &format!("{prefix}.head"), h)
    }
}

impl Layer for SpectralEncoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.bn1.visit_params(&format!("{prefix}.bn1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.bn2.visit_params(&format!("{prefix}.bn2"), f);
        self.head.visit_params(&format!("{prefix}.head"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.bn1.visit_buffers(&format!("{prefix}.bn1"), f);
        self.bn2.visit_buffers(&format!("{prefix}.bn2"), f);
    }
}

// ── spatial encoder ────────────────────────────────────────────────────

/// 2-D residual CNN over projected patches: stem conv3×3→BN→ReLU, one
/// same-shape residual block, one downsampling residual block (stride 2,
/// projected skip), then flatten→affine to `l_p`.
#[derive(Debug, Clone)]
pub struct SpatialEncoder {
    pub stem: Conv2d,
    pub stem_bn: BatchNorm,
    pub block1: SeResBlock,
    pub block2: SeResBlock,
    pub head: Affine,
    in_channels: usize,
    width: usize,
    flat_dim: usize,
}

impl SpatialEncoder {
    pub fn new(cfg: &EncoderConfig, in_channels: usize, width: usize, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        if in_channels == 0 {
            return Err(Error::config("spatial encoder needs at least one input channel"));
        }
        if width < 5 {
            return Err(Error::config(format!(
                "patch width {width} is too small for the stride plan (needs >= 5)"
            )));
        }
        let [b1, b2] = cfg.block_channels;
        let reduced = conv_out(width, 3, 1, 2);
        let flat_dim = b2 * reduced * reduced;
        Ok(SpatialEncoder {
            stem: Conv2d::new(in_channels, cfg.stem_channels, 3, 1, 1, rng),
            stem_bn: BatchNorm::new(cfg.stem_channels),
            block1: SeResBlock::new(cfg.stem_channels, b1, 1, cfg.use_se, cfg.se_reduction, rng)?,
            block2: SeResBlock::new(b1, b2, 2, cfg.use_se, cfg.se_reduction, rng)?,
            head: Affine::new(flat_dim, cfg.l_p, rng),
            in_channels,
            width,
            flat_dim,
        })
    }

    /// `x`: `[n, in_channels, width, width]` → `[n, l_p]`.
    pub fn forward(&mut self, tape: &mut Tape, prefix: &str, x: ValueId, mode: Mode) -> Result<ValueId> {
        let sx = tape.value(x).shape().to_vec();
        if sx.len() != 4 || sx[1] != self.in_channels || sx[2] != self.width || sx[3] != self.width {
            return Err(Error::contract(format!(
                "spatial encoder expects [n, {}, {}, {}], got {:?}",
                self.in_channels, self.width, self.width, sx
            )));
        }
        let n = sx[0];
        let mut h = self.stem.forward(tape, &format!("{prefix}.stem"), x)?;
        h = self.stem_bn.forward(tape, &format!("{prefix}.stem_bn"), h, mode)?;
        h = tape.relu(h)?;
        h = self.block1.forward(tape, &format!("{prefix}.block1"), h, mode)?;
        h = self.block2.forward(tape, &format!("{prefix}.block2"), h, mode)?;
        let flat = tape.reshape(h, &[n, self.flat_dim])?;
        self.head.forward(tape, &format!("{prefix}.head"), flat)
    }
}

impl Layer for SpatialEncoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.stem.visit_params(&format!("{prefix}.stem"), f);
        self.stem_bn.visit_params(&format!("{prefix}.stem_bn"), f);
        self.block1.visit_params(&format!("{prefix}.block1"), f);
        self.block2.visit_params(&format!("{prefix}.block2"), f);
        self.head.visit_params(&format!("{prefix}.head"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.stem_bn.visit_buffers(&format!("{prefix}.stem_bn"), f);
        self.block1.visit_buffers(&format!("{prefix}.block1"), f);
        self.block2.visit_buffers(&format!("{prefix}.block2"), f);
    }
}

/// Joint features: spatial columns first, spectral columns after, so
/// `Z_j[:, ..l_p] == Z_p` and `Z_j[:, l_p..] == Z_b`.
pub fn fuse(tape: &mut Tape, z_p: ValueId, z_b: ValueId) -> Result<ValueId> {
    tape.concat_cols(z_p, z_b)
}
