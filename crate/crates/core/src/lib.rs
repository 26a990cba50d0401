//! Baseline-aware attribution for small feed-forward networks.
//!
//! The network is split at any layer into a head and a tail. Attributions
//! are computed on the head's output features against a baseline that is
//! itself the head's image of an input-space baseline, and every result is
//! audited by how far its sum lands from the exact change in the explained
//! output.
//!
//! Modules, bottom-up:
//! - [`tensor`], [`ops`], [`tape`], [`gradcheck`]: dense tensors, primitive
//!   kernels, reverse-mode differentiation and its finite-difference oracle.
//! - [`model`]: the `.model.json` format, validation, and [`model::SplitView`].
//! - [`attribution`]: integrated gradients and its single-step special cases.
//! - [`report`], [`eval`]: attribution error, refinement, batch audits,
//!   convergence studies.
//! - [`render`]: signed heatmaps as PPM.
//! - [`fixtures`]: deterministic analytic and random models.

pub mod attribution;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod render;
pub mod report;
pub mod tape;
pub mod tensor;

pub use attribution::{
    gradient_times_input, integrated_gradients, layer_integrated_gradients, layercam,
    odam_combine, odam_single, taylor_first_order, AttributionMap, BaselineProvenance, Method,
    PathSpec, Scheme,
};
pub use error::{Error, Result};
pub use model::{LayerSpec, Model, SplitView, Target, TargetSpace};
pub use report::{attribution_error, AttributionReport};
pub use tensor::Tensor;
