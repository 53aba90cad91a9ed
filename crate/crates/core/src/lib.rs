//! Patellofemoral osteoarthritis progression prediction.
//!
//! The crate covers the whole workflow on a synthetic cohort with planted
//! signal:
//!
//! - [`synth`]: labeled cohort generation and knee rendering
//! - [`roi`]: landmark alignment, ROI extraction, intensity normalization
//! - [`tensor`]: a small reverse-mode autodiff engine
//! - [`attention`]: VGG-style CNN with trainable spatial attention
//! - [`gbm`]: histogram gradient boosting with exact Shapley values
//! - [`metrics`]: ROC/PR, AUC, AP, Brier, DeLong test and intervals
//! - [`cv`]: subject-wise stratified folds and second-layer stacking

pub mod attention;
pub mod cv;
pub mod error;
pub mod gbm;
pub mod geometry;
pub mod metrics;
pub mod raster;
pub mod rng;
pub mod roi;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
