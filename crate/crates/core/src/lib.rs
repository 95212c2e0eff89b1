//! Household socioeconomic-position (SEP) prediction from multimodal imagery.
//!
//! The crate covers the whole workflow: building the three ground-truth SEP
//! measures (summed income, summed expenditure, and an MCA asset index),
//! preprocessing satellite rasters, training small convolutional feature
//! extractors per image type, fitting elastic net / random forest / gradient
//! boosted tree regressions with randomized cross-validated search, and
//! explaining the tree models with exact TreeSHAP grouped by image.
//!
//! A synthetic cohort generator with planted signal stands in for private
//! survey data so every stage can be exercised end to end.

pub mod dataset;
pub mod error;
pub mod extractor;
pub mod imagery;
pub mod mca;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod shap;
pub mod stats;
pub mod tabular;

pub use error::{Error, Result};
