use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
///
/// Graph-related variants carry the offending layer id so that messages
/// point at the node in `model.json`.
#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("malformed tensor file {path}: {detail}")]
    TensorFormat { path: PathBuf, detail: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("layer `{layer}`: unknown layer kind `{kind}`")]
    UnknownKind { layer: String, kind: String },

    #[error("layer `{layer}`: missing parameter `{reference}`")]
    MissingParameter { layer: String, reference: String },

    #[error("layer `{layer}`: input `{input}` is not declared before it (cycle or non-topological order)")]
    DagViolation { layer: String, input: String },

    #[error("layer `{layer}`: input `{input}` does not exist")]
    DanglingInput { layer: String, input: String },

    #[error("duplicate layer id `{0}`")]
    DuplicateLayer(String),

    #[error("layer `{layer}`: {detail}")]
    InvalidLayer { layer: String, detail: String },

    #[error("layer `{layer}`: shape mismatch: {detail}")]
    LayerShape { layer: String, detail: String },

    #[error("graph: {0}")]
    InvalidGraph(String),

    #[error("layer `{layer}`: batch norm requires running_var + epsilon > 0 (channel {channel})")]
    NonPositiveVariance { layer: String, channel: usize },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("no calibration entry for `{0}`")]
    MissingCalibration(String),

    #[error("layer `{0}` has no weights")]
    Weightless(String),

    #[error("quantization config: {0}")]
    Config(String),

    #[error("equalization: {0}")]
    Equalize(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: row {row}: {detail}")]
    Csv {
        path: PathBuf,
        row: usize,
        detail: String,
    },

    #[error("unknown fixture architecture `{0}`")]
    UnknownArch(String),

    #[error("report: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn layer(layer: &str, detail: impl Into<String>) -> Self {
        Error::InvalidLayer { layer: layer.to_string(), detail: detail.into() }
    }
}
