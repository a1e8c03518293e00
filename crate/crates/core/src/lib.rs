//! Spiking-neuron regularized visual prompt tuning.
//!
//! A frozen transformer backbone is adapted to a new classification task by
//! training per-layer prompts. In the spiking variant each continuous prompt
//! passes through a bank of integrate-and-fire neurons (rate coding) and a
//! binary threshold before injection, trained with an arctan surrogate
//! gradient. After training, the binary prompts are cached constants, so
//! inference costs the same as ordinary prompted inference.

pub mod backbone;
pub mod cli;
pub mod corruption;
pub mod error;
pub mod format;
pub mod gradcheck;
pub mod pipeline;
pub mod spiking;
pub mod tensor;

pub use error::{Error, Result};
