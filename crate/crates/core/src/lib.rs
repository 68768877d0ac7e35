//! Domain-adaptive class-incremental 3D detection on synthetic point clouds.
//!
//! The crate covers the whole pipeline: ground-truth object databases,
//! dual-domain copy-paste augmentation, a small voting detector with
//! hand-written backpropagation, dual-teacher distillation with EMA updates,
//! and mAP evaluation. [`workbench`] generates the two synthetic domains and
//! drives end-to-end experiments.

pub mod augment;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gtdb;
pub mod losses;
pub mod optim;
pub mod par;
pub mod rng;
pub mod trainer;
pub mod workbench;

pub use error::{Error, Result};
