//! Whole-slide image classification by dynamic residual encoding.
//!
//! Tile vectors pass through a trainable encoder into a persistent
//! [`bank::MemoryBank`], are aggregated per slide by VLAD residual encoding
//! against a frozen K-means [`codebook::Codebook`], enhanced by a
//! transformer-style [`head::SlideHead`], and trained jointly with a
//! classification loss and a bidirectional slide/report contrastive loss.

pub mod bank;
pub mod checkpoint;
pub mod cli;
pub mod codebook;
mod codec;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod head;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod par;
pub mod param;
pub mod trainer;
pub mod vlad;

pub use error::{Error, Result};
