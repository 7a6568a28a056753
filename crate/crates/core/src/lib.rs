//! Attribute-highlighted text embeddings for fine-grained open-vocabulary
//! detection, at toy scale.

pub mod composer;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod extractor;
pub mod fitter;
pub mod mask;
pub mod seed;
pub mod tokenizer;

pub use error::{Error, Result};
