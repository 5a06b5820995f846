//! Data-scarcity training toolkit for ordinal grading and lesion segmentation:
//! reliable pseudo labeling, combined segmentation losses, deep ensembles,
//! test-time augmentation and rule-based post-processing, all runnable at
//! desk scale on synthetic data.

pub mod augment;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod learners;
pub mod metrics;
pub mod pipeline;
pub mod postprocess;
pub mod rng;
pub mod ssl;

pub use error::{Error, Result};
