use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("value space mismatch: expected {expected}, found {found}")]
    ValueSpace { expected: &'static str, found: &'static str },

    #[error("non-finite loss term `{0}`")]
    NonFinite(&'static str),

    #[error("magnification {requested}x not available; available levels: {available}")]
    Magnification { requested: f64, available: String },

    #[error("missing patches for manifest entries: {}", .0.join(", "))]
    MissingPatches(Vec<String>),

    #[error("duplicate patch id `{0}`")]
    DuplicatePatch(String),

    #[error("patch `{0}` is not part of the manifest")]
    UnknownPatch(String),

    #[error("invalid layer id {id}; valid ids are {valid:?}")]
    LayerId { id: usize, valid: Vec<usize> },

    #[error("requested {requested} samples but only {available} available")]
    SampleCount { requested: usize, available: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("duplicate response for rater `{rater}` on item `{item}`")]
    DuplicateResponse { rater: String, item: String },

    #[error("extractor mismatch: `{0}` vs `{1}`")]
    ExtractorMismatch(String, String),

    #[error("covariance matrix is not positive semi-definite (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("insufficient patches in {class}: need {needed}, found {found}")]
    InsufficientPatches { class: &'static str, needed: usize, found: usize },

    #[error("survey: {0}")]
    Survey(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("slide `{slide_id}`: {source}")]
    Slide { slide_id: String, source: Box<Error> },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
