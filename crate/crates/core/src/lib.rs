//! Trainable temporal post-processing for multi-state measurement records.
//!
//! A TPP is the linear map `y = W x + b` applied to a flattened time series
//! `x`, trained by least squares against one-hot class targets. The crate
//! also provides the closed-form and analytic filter constructions, the
//! filtered Gaussian discriminant baselines, evaluation metrics and a
//! synthetic heterodyne record generator.

pub mod datamodel;
pub mod discriminators;
pub mod error;
pub mod filters;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod simulator;
pub mod training;

pub use datamodel::{HeterodyneRecord, LabeledDataset, MomentSummary};
pub use error::{Result, TppError};
pub use training::{TrainedTpp, TrainingMethod, TrainingOptions};

/// Library version, reported by the command-line front end.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
