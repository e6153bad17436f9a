//! Attention-augmented CNN forecaster for binary full-disk solar flare
//! prediction (>= M1.0 within 24 hours), with the supporting data pipeline,
//! skill-score verification and attention-map interpretation.

pub mod error;
pub mod flarenet;
pub mod heliodata;
pub mod interpret;
pub mod ndtensor;
pub mod runconfig;
pub mod skillscores;
pub mod trainer;

pub use error::{Error, Result};
