//! Desk-scale laboratory for 3D-aware gaze redirection.
//!
//! Two disentangled conditional radiance fields (face-without-eyes and eyes)
//! are rendered to low-resolution feature grids, the eye features are rigidly
//! rotated by the target-gaze rotation matrix, the grids are merged by an
//! element-wise maximum, and a shared learnable upsampling decoder produces
//! the final images. Everything is trained and verified end-to-end on a
//! procedurally generated synthetic head dataset with exact ground-truth gaze
//! and masks.

pub mod camera;
pub mod compositor;
pub mod error;
pub mod estimators;
pub mod field;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod objectives;
pub mod pixels;
pub mod synth;
pub mod tape;

pub use error::{Error, Result};
