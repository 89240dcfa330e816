//! Routing-free mixture-of-experts laboratory.

pub mod balancing;
pub mod epcost;
pub mod error;
pub mod evalstats;
pub mod exec;
pub mod gating;
pub mod numerics;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
