//! Embedding-space adaptation of vision-language classifiers.
//!
//! The crate works on precomputed image and text embeddings:
//!
//! - [`zeroshot`]: cosine/temperature-softmax classification against
//!   prompt-keyed class anchors, optionally built from domain-decorated
//!   prompts;
//! - [`selftrain`]: confidence-thresholded pseudo-labels and Adam training
//!   of per-class residuals added to the anchors;
//! - [`dg`]: shared + per-domain residuals for label-free multi-source
//!   domain generalization, with shared-only inference;
//! - [`synth`]: seeded synthetic multi-domain problems;
//! - [`io`]: the binary bank/label/residual formats and dataset manifests;
//! - [`gradcheck`]: finite-difference verification of the residual gradient.

pub mod cli;
pub mod dg;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod report;
pub mod selftrain;
pub mod synth;
pub mod zeroshot;

pub use embedding::{cosine_sim, l2_normalize, softmax_scaled, Matrix, Temperature};
pub use error::{Error, Result};
