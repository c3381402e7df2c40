//! Point, segment, and count: a detection-based object counting pipeline.

pub mod benchmark;
pub mod checkpoint;
pub mod classification;
pub mod embed;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod heatmap;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod proposal;
pub mod rle;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
