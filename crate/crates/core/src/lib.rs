//! Token-level contrastive skill extraction.

pub mod autograd;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod explain;
pub mod extraction;
pub mod matching;
pub mod objective;
pub mod text;
pub mod title;
pub mod training;

pub use error::{Error, Result};
