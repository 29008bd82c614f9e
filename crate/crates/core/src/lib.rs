//! Physics-aligned precipitation nowcasting core.
//!
//! Pure algorithmic building blocks: raster field types, optical-flow
//! estimation (Lucas-Kanade and a spectral solver), a differentiable
//! semi-Lagrangian warp, supervision losses, a minimal reverse-mode
//! autodiff tape, a toy variational motion/intensity model with
//! lead-time conditioning, skill-score verification, and rain-event
//! dataset machinery. No I/O lives here; the companion tools crate
//! carries file formats and the CLI.

#![no_std]

extern crate alloc;

pub mod advect;
pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod field;
pub mod flow;
pub mod gradcheck;
pub mod grid;
pub mod linalg;
pub mod math;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod spectral;
pub mod supervise;

pub use error::{Error, Result};
pub use field::{FieldSequence, IntensityField, MotionField, PrecipField};
pub use grid::Grid;
