//! swinsight: a from-scratch windowed-attention image classifier for
//! CGI-vs-photograph forensics, with its full experiment apparatus.
//!
//! The crate is organized as a library; the `swinsight` binary is a thin
//! front-end over [`runner`]. Each major capability also has a runnable
//! example under `examples/`:
//!
//! - `tensor`: dense tensors and the reverse-mode autodiff tape
//! - `swin`: patch embedding, (shifted-)window attention, patch merging,
//!   the hierarchical classifier and its feature extractor
//! - `train`: cross-entropy, Adam, the epoch loop, checkpoints
//! - `data`: manifests, image decoding/resizing/normalization, class
//!   balancing, splits, the synthetic fixture generator
//! - `tsne`: exact t-SNE over extracted features
//! - `metrics`: confusion matrix, precision/recall/F1, ROC and AUC
//! - `plot`: dependency-free SVG renderings of curves, ROC and scatters
//! - `runner`: experiment configs and the fixture/train/eval/matrix/
//!   tsne/report commands the CLI exposes

pub mod data;
pub mod error;
pub mod metrics;
mod parallel;
pub mod plot;
pub mod runner;
pub mod swin;
pub mod tensor;
pub mod train;
pub mod tsne;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
