//! Spatio-temporal road-risk modeling on accident-derived segment graphs:
//! clustering of raw accident points into segments, multi-relational edge
//! construction with spectral validation, attention-based feature fusion,
//! focal-loss training, and an evaluation suite, all reproducible bit for
//! bit from a seed.

pub mod diffcore;
pub mod error;
pub mod features;
pub mod geo;
pub mod graphbuild;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod par;
pub mod rng;
pub mod train;
pub mod verify;

pub use error::{Result, StarnError};
