//! Detector-then-classify pipeline for camera-trap images with an
//! active-learning loop.

pub mod active;
pub mod classifier;
pub mod config;
pub mod embedding;
pub mod error;
pub mod imaging;
pub mod ingest;
pub mod merge;
pub mod metrics;
pub mod pipeline;
pub mod seed;
pub mod store;
pub mod synth;
pub mod tuning;
pub mod workflow;

pub use error::{Error, Result};
