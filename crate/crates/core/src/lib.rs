//! Attention encoder-decoder for long-form sequence transcription, built
//! around a context-limited encoder whose receptive field is an explicit,
//! testable quantity. Includes the data-level training transforms and the
//! two-pass decoding pipeline that let the attention decoder consume
//! arbitrary slices of a continuous encoding stream.

mod attn;
pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod datapipe;
pub mod decode;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
