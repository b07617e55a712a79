//! Outlier-robust fitting of a differentiable 2D Gaussian-splat image model.
//!
//! The crate reconstructs a static scene from a set of views polluted by
//! transient distractors. Every training step renders the model, measures
//! per-pixel residuals, and derives an inlier mask that multiplies the L1
//! reconstruction loss. Masks come from one of several estimators:
//!
//! * trimmed residual masks with spatial smoothing and patch voting
//!   ([`robust_mask`]), driven by a discounted residual histogram
//!   ([`residual_stats`]);
//! * cluster votes over per-pixel semantic features, or a small
//!   self-supervised classifier ([`semantic_mask`], [`smallnet`]).
//!
//! [`datagen`] builds deterministic synthetic scenes with ground-truth
//! distractor masks so every masking claim can be checked numerically, and
//! [`trainer`] ties everything together with evaluation and logging.

pub mod config;
pub mod datagen;
pub mod image;
pub mod io;
pub mod kernels;
pub mod optim;
pub mod residual_stats;
pub mod robust_mask;
pub mod semantic_mask;
pub mod smallnet;
pub mod splat2d;
pub mod trainer;

pub use image::{ColorImage, InlierMask, Plane};
