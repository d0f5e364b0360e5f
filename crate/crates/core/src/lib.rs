//! Speaker-memory adaptation for joint CTC-attention recognisers.

pub mod config;
pub mod corpus;
pub mod ctc;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod memory;
pub mod model;
pub mod nn;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
