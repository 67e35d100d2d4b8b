//! Direct text-to-speech translation over discrete acoustic units.
//!
//! The pipeline: a unit-discovery stage turns reference audio into a
//! codebook of discrete units, a transformer translates source text into
//! unit sequences, and a bank of tonal carriers synthesizes audible speech
//! from those units. Everything — numerics, training, decoding, synthesis,
//! evaluation — is self-contained and deterministic given a seed.

pub mod audio;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod seed;
pub mod synthesis;
pub mod tensor;
pub mod training;
pub mod units;

pub use error::{Error, ErrorKind, Result};
