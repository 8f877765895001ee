//! Decoding binary speech/silence sequences from multichannel MEG with a
//! hierarchical convolution/attention/LSTM sequence model.

pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod signal;
pub mod training;

pub use error::{Error, ErrorKind, Result};
