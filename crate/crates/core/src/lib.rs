//! Desk-scale pose-aware 3D-aware image generator: cameras, tri-plane fields,
//! volume rendering, a dual-branched discriminator, training, and evaluation.

pub mod ablate;
pub mod camera;
pub mod checkpoint;
pub mod data;
pub mod disc;
pub mod error;
pub mod eval;
pub mod fields;
pub mod losses;
pub mod nn;
pub mod plot;
pub mod render;
pub mod report;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
