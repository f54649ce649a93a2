//! Long-tailed classification lab.
//!
//! - [`losses`]: softmax / Balanced Softmax, multi-binary / Balanced Sigmoid,
//!   class-balanced weighting, and posterior conversion between balanced and
//!   training priors.
//! - [`margins`]: per-class margins, the margin generalization bound and the
//!   `n^{-1/4}` optimal margin allocation.
//! - [`data`]: long-tailed count profiles, Gaussian mixtures with exact Bayes
//!   posteriors, CSV I/O.
//! - [`sampling`]: instance-balanced, class-balanced and repeat-factor epochs.
//! - [`training`]: deterministic SGD for linear/MLP classifiers plus cRT and
//!   LWS second stages.
//! - [`eval`]: balanced accuracy, frequency groups, marginal likelihood `p(y)`.
//! - [`experiment`]: config-driven runs and sweeps that write metrics to disk.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod margins;
pub mod numerics;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
pub use losses::{ClassCounts, LossKind, LossSpec, PosteriorVector};
pub use numerics::{Matrix, Rng};
