//! Lightweight zero-shot text-to-speech acoustic model with two-stage
//! self-distillation, at desk scale.

pub mod config;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod distill;
pub mod eval;
pub mod error;
pub mod model;
pub mod objectives;
pub mod rng;

mod io_util;

pub use error::{Error, Result};
