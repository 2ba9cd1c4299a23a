//! Numeric foundation: dense tensors, a reverse-mode autodiff tape, sparse
//! matrices, parameterized layers, and a deterministic random source.

pub mod csr;
pub mod layers;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use csr::CsrMatrix;
pub use layers::{Affine, BatchNorm, Conv1d, Conv2d, Layer};
pub use rng::{stream, SeededRng};
pub use tape::{full_mask, Mode, Tape, ValueId};
pub use tensor::Tensor;
