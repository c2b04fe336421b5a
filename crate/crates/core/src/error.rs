use std::io;

use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("malformed event file at byte {offset}: {reason}")]
    MalformedEvents { offset: u64, reason: String },

    #[error("event at byte {offset} lies outside the {width}x{height} sensor: ({x}, {y})")]
    OutOfRange {
        offset: u64,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },

    #[error("decreasing timestamp at byte {offset}: {t} after {prev}")]
    DecreasingTimestamp { offset: u64, t: u64, prev: u64 },

    #[error("invalid event stream: {0}")]
    InvalidStream(String),

    #[error("unknown synthetic pattern `{0}`")]
    UnknownPattern(String),

    #[error("out-of-order insertion: t={t} precedes latest t={latest}")]
    OutOfOrder { t: u64, latest: u64 },

    #[error("node index {index} out of range (graph has {len} nodes)")]
    NodeIndex { index: usize, len: usize },

    #[error("offset ({dx}, {dy}) not covered by the look-up table of layer `{layer}`")]
    UncoveredOffset { layer: String, dx: i64, dy: i64 },

    #[error("empty offset set")]
    EmptyOffsets,

    #[error("channel mismatch in `{layer}`: expected {expected}, got {actual}")]
    ChannelMismatch {
        layer: String,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch for `{path}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        path: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("unknown layer path `{0}`")]
    UnknownPath(String),

    #[error("duplicated layer path `{0}`")]
    DuplicatePath(String),

    #[error("corrupt weight container: {0}")]
    CorruptWeights(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
