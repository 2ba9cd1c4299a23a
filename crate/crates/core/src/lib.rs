//! Hyperspectral image classification with a two-branch graph convolutional
//! network over fused spectral and spatial features, trained with a
//! cross-entropy plus reliable-sample contrastive objective.
//!
//! Module map:
//! - [`numkit`]: tensors, reverse-mode autodiff tape, CSR matrices, layers, RNG
//! - [`preprocess`]: band normalization, PCA, patch extraction, splits
//! - [`encoders`]: spectral 1-D CNN and spatial SE-residual CNN, feature fusion
//! - [`graph`]: kNN graph construction, adjacency normalization, GCN branches
//! - [`contrast`]: reliable candidate sets, contrastive and cross-entropy losses
//! - [`trainer`]: model assembly, training loop, prediction, metrics, checkpoints
//! - [`dataio`]: dataset bundle format, synthetic scenes, maps, run configuration
//!
//! Everything is deterministic given a seed: same config + seed reproduces
//! training logs byte for byte.

#![forbid(unsafe_code)]

pub mod contrast;
pub mod dataio;
pub mod encoders;
pub mod error;
pub mod graph;
pub mod numkit;
pub mod preprocess;
pub mod testkit;
pub mod trainer;

pub use error::{Error, Result};
