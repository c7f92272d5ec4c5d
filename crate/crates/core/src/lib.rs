//! Detection and localization of GAN-manipulated flood images.

pub mod cli;
pub mod data;
pub mod dataset;
pub mod error;
pub mod explain;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod resample;
pub mod robustness;
pub mod trainer;

pub use error::{Error, Result};
