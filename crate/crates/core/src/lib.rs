//! Contour-evolution instance segmentation.
//!
//! An initial box contour is deformed over a few iterations by a learned
//! head. Vertex features come from differential convolutions over a
//! predicted log-distance energy map, and a cross-attention step mixes in
//! the previous iteration's displacements.

pub mod amem;
pub mod dataset;
pub mod dcim;
pub mod diff;
pub mod energymap;
pub mod error;
pub mod evolution;
pub mod geometry;
pub mod model;
pub mod pnm;
pub mod trainer;

pub use error::{Error, Result};
