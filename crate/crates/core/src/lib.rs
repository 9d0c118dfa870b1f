//! Self-improving multi-view reconstruction at desk scale.
//!
//! The crate bundles four pieces:
//!
//! * [`scene`] — a procedural generator and ray-cast renderer for dynamic
//!   3D scenes, producing labeled frame sequences and a covisibility score.
//! * [`model`] — a small patch-token transformer that predicts per-frame
//!   depth maps and cameras from a frame sequence, with inspectable
//!   attention and analytic gradients.
//! * [`distill`] — the teacher–student self-distillation engine: context
//!   asymmetry construction, pseudo targets, losses, the optimizer, EMA
//!   teacher updates and the training loop.
//! * [`metrics`] — the evaluation protocol: aligned depth errors, relative
//!   pose errors, pose AUC, and the context-curve analysis.

pub mod autodiff;
pub mod distill;
pub mod error;
pub mod geom;
pub mod metrics;
pub mod model;
pub mod scene;
pub mod tensor;

pub use error::{CoreError, Result};
pub use geom::{CameraPose, Intrinsics, Quat, Vec3};
