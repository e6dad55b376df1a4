//! Lookup-free quantized image tokenizer and a factorized autoregressive
//! generator that predicts each token as a short sequence of sub-tokens.

pub mod ar;
pub mod cli;
mod binio;
pub mod error;
pub mod eval;
pub mod factorizer;
pub mod lfq;
pub mod nn;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
