//! Image transmission over a noisy channel with learned AE and VAE codecs.

pub mod channel;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gradcases;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
