//! Review service for fused circle detections.
//!
//! Serves the fused set over HTTP/JSON, applies reviewer edits through a
//! single writer with an append-only log, and persists the reviewed set as
//! GeoJSON.

pub mod server;
pub mod state;

pub use server::{router, serve, App, BackgroundImage, ExportResult, ServiceConfig};
pub use state::{EditLog, EditOp, OpKind, Payload, ReviewState, Status};
