//! Discrimination-free insurance pricing when the sensitive attribute is
//! only available through local differential privacy.

pub mod correction;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fair;
pub mod linalg;
pub mod model;
pub mod noise;
pub mod privacy;
pub mod protocol;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
