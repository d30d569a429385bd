//! Weakly supervised contrastive training for conditioned report generation.

pub mod cli;
pub mod datakit;
pub mod decoding;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod pipeline;
pub mod text;
pub mod trainer;
pub mod weaklabel;

pub use error::{Error, Result};
