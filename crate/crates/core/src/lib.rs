//! Multi-grained vision-language person re-identification with adaptively
//! masked part attention, sized to train on a CPU against synthetic data.

pub mod am_msa;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod graph;
pub mod grounding;
pub mod image_encoder;
mod io_util;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod synth_data;
pub mod text_encoder;
pub mod trainer;

pub use error::{Error, Result};
