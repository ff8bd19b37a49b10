//! Training, fine-tuning, ablation, and calibration harness.

pub mod ablation;
pub mod calibrate;
pub mod checkpoint;
pub mod config;
pub mod model;
pub mod optim;
pub mod train;

pub use optim::Adam;
