pub mod adversary;
pub mod bilevel;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cue;
pub mod data;
pub mod enhancer;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod normalization;
pub mod objectives;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
