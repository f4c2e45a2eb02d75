//! Socio-temporal graph transformer for multi-agent trajectory forecasting.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod dump;
pub mod error;
pub mod eval;
pub mod infer;
pub mod model;
pub mod nn;
pub mod params;
pub mod stg;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
