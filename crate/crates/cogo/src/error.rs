//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CogoError>;

#[derive(Debug, Error)]
pub enum CogoError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: expected {expected} data values for shape {shape:?}, got {got}")]
    DataLength {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("non-finite values in {context}")]
    NonFinite { context: String },

    #[error("non-finite gradient at attack iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("stale node handle: node {index} belongs to graph {node_graph}, not graph {graph}")]
    StaleNode {
        index: usize,
        node_graph: u64,
        graph: u64,
    },

    #[error("unknown hook handle {0}")]
    UnknownHook(u64),

    #[error("gradient hook changed shape: {input:?} -> {output:?}")]
    HookShape {
        input: Vec<usize>,
        output: Vec<usize>,
    },

    #[error("no node tagged '{0}' in this graph; was the forward pass run?")]
    MissingSite(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("unknown variant '{got}'; valid variants: {valid}")]
    UnknownVariant { got: String, valid: &'static str },

    #[error("unknown hook site kind '{got}'; valid kinds: qkv, proj, attn_dropout, mlp")]
    UnknownSiteKind { got: String },

    #[error("unknown sweep axis '{got}'; valid axes: {valid}")]
    UnknownAxis { got: String, valid: &'static str },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint spec mismatch on field '{field}': file has {file}, expected {expected}")]
    SpecMismatch {
        field: &'static str,
        file: String,
        expected: String,
    },

    #[error("report schema version {got}, expected {expected}")]
    SchemaVersion { got: u32, expected: u32 },

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}
