//! Post-processing engine for circle detections on whole-slide images.
//!
//! The flow mirrors a typical slide-level detection run: tile slide space into
//! half-overlapping patches, collect per-model patch detections, move them back
//! to slide coordinates, de-duplicate each model with circle NMS, fuse the
//! ensemble with weighted circle fusion, and export or evaluate the result.

pub mod backends;
pub mod bench;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod geojson_io;
pub mod geometry;
pub mod pipeline;
pub mod spatial;
pub mod suppression;
pub mod synthsim;
pub mod tiling;

pub use detection::{Detection, ModelRun, RunSource};
pub use error::{Error, Result};
pub use geometry::{ciou, intersection_area, Circle};
