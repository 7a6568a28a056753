use thiserror::Error;

use crate::composer::ComposeError;
use crate::encoder::EncoderError;
use crate::extractor::ExtractError;
use crate::mask::MaskError;
use crate::tokenizer::TokenizeError;

/// Errors surfaced by the end-to-end pipeline (dataset, evaluation, fitting).
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error("unknown subset `{0}`")]
    UnknownSubset(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("fit: {0}")]
    Fit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
