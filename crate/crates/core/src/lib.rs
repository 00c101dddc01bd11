//! Pixel-level actor and action segmentation in video, conditioned on a
//! natural-language sentence.
//!
//! A sentence is encoded into a vector that generates per-resolution dynamic
//! filters; the filters are correlated with a multi-resolution feature
//! pyramid computed from the clip, producing response maps whose positive
//! region at the highest resolution is the predicted mask.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod embeddings;
pub mod error;
pub mod inference;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod textenc;
pub mod trainer;
pub mod videoenc;

pub use error::{Error, Result};
