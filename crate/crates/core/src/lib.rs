//! Geometry-aware rectified-flow augmentation for short time series.

pub mod conditioner;
pub mod data;
pub mod error;
pub mod forecast;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rectflow;
pub mod selector;

pub use error::{Error, Result};
