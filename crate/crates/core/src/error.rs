use std::io;

use thiserror::Error;

/// Distinguishes the ways a WAV file can be rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatErrorKind {
    Empty,
    Truncated,
    NotPcm,
    MultiChannel,
    UnsupportedDepth,
    Malformed,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported upsample: {from} Hz -> {to} Hz")]
    UnsupportedUpsample { from: u32, to: u32 },

    #[error("format error ({kind:?}): {msg}")]
    Format { kind: FormatErrorKind, msg: String },

    #[error("no canonical plan for {0} Hz")]
    NoCanonicalPlan(u32),

    #[error("incompatible rate: dr = {dr}")]
    IncompatibleRate { rate_hz: u32, dr: f64 },

    #[error("unfactorable rate: {rate_hz} Hz has prime factor {factor} > 7")]
    UnfactorableRate { rate_hz: u32, factor: u64 },

    #[error("input too short: need {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("unsupported rate: no branch for {0} Hz")]
    UnsupportedRate(u32),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("alignment error: {labels} labels vs {frames} frames")]
    Alignment { labels: usize, frames: usize },

    #[error("no utterances for configured rate {0} Hz")]
    EmptyRate(u32),

    #[error("non-finite loss at step {step} (rate {rate_hz} Hz, utterance {utterance})")]
    NonFiniteLoss { step: u64, rate_hz: u32, utterance: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(kind: FormatErrorKind, msg: impl Into<String>) -> Self {
        Error::Format { kind, msg: msg.into() }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::NonFiniteLoss { .. } | Error::Checkpoint(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
