use std::path::PathBuf;

use crate::metrics::HeadId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
///
/// [`Error::is_io`] separates filesystem failures from validation failures;
/// the command-line front end maps them to different exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // Binary formats.
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated file: needed {needed} bytes at offset {offset}, {available} available")]
    TruncatedFile { offset: usize, needed: usize, available: usize },
    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: usize },
    #[error("dimension `{name}` is zero")]
    DimensionZero { name: &'static str },
    #[error(
        "attention row (layer {layer}, head {head}, query {query}) sums to {sum}, tolerance {tolerance}"
    )]
    RowNotStochastic { layer: usize, head: usize, query: usize, sum: f64, tolerance: f64 },
    #[error("negative attention entry {value} at (layer {layer}, head {head}, query {query}, key {key})")]
    NegativeAttention { layer: usize, head: usize, query: usize, key: usize, value: f64 },
    #[error("non-finite value at element {index} of {what}")]
    NonFinite { what: String, index: usize },
    #[error("invalid utf-8 in tensor name at offset {offset}")]
    BadTensorName { offset: usize },

    // Text formats.
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("label {label} at frame {frame} out of range for inventory of size {size}")]
    LabelOutOfRange { frame: usize, label: usize, size: usize },
    #[error("duplicate utterance id `{0}`")]
    DuplicateUtterance(String),
    #[error("duplicate inventory symbol `{0}`")]
    DuplicateSymbol(String),
    #[error("inventory has {0} symbols; at least 2 are required")]
    InventoryTooSmall(usize),
    #[error("inventory lacks the reserved symbol `{0}`")]
    MissingReservedSymbol(&'static str),
    #[error("inventory is empty")]
    EmptyInventory,
    #[error("frame count mismatch for `{utterance}`: {what} has {found} frames, expected {expected}")]
    FrameCountMismatch { utterance: String, what: &'static str, expected: usize, found: usize },
    #[error("manifest entry `{utterance}` has no attention dump")]
    MissingAttention { utterance: String },

    // Alignment.
    #[error("negative duration {0} s")]
    NegativeDuration(f64),
    #[error("invalid alignment interval {index}: {message}")]
    BadInterval { index: usize, message: String },
    #[error("invalid frame spec: {0}")]
    BadFrameSpec(String),

    // Metrics.
    #[error("negative probability {value} at index {index}")]
    NegativeEntry { index: usize, value: f64 },
    #[error("no utterances to average over")]
    EmptyUtteranceSet,
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("model shape mismatch: expected {expected_layers}x{expected_heads} heads, `{utterance}` has {layers}x{heads}")]
    MismatchedModelShape {
        utterance: String,
        expected_layers: usize,
        expected_heads: usize,
        layers: usize,
        heads: usize,
    },
    #[error("sample of {sample} utterances requested from a dataset of {available}")]
    SampleLargerThanDataset { sample: usize, available: usize },
    #[error("categorization needs at least two heads")]
    SingleHead,

    // Relation maps.
    #[error("length mismatch: attention has {attention} frames, labels have {labels}")]
    LengthMismatch { attention: usize, labels: usize },
    #[error("layer {layer} out of range for a {layers}-layer model")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("head {head} out of range for {heads} heads per layer")]
    HeadOutOfRange { head: usize, heads: usize },
    #[error("empty head selection")]
    EmptyHeadSet,
    #[error("relation map inventory mismatch: {left} vs {right} symbols")]
    PrmInventoryMismatch { left: usize, right: usize },

    // Model.
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found:?}, config requires {expected:?}")]
    ShapeMismatchWithConfig { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("head {0} outside the model")]
    HeadOutsideModel(HeadId),
    #[error("override for head {head} is not row-stochastic: {message}")]
    BadOverride { head: HeadId, message: String },

    // Synthesis.
    #[error("invalid pattern spec: {0}")]
    BadSpec(String),
    #[error("invalid dataset config: {0}")]
    BadDatasetConfig(String),

    // Probe.
    #[error("split needs at least 2 utterances, got {0}")]
    TooFewUtterances(usize),
    #[error("split ratio {0} must lie strictly between 0 and 1")]
    BadRatio(f64),
    #[error("training set has no frames")]
    EmptyTrainingSet,
    #[error("loss became non-finite at step {0}")]
    NonFiniteLoss(usize),
    #[error("probe has {probe} classes but the inventory has {inventory}")]
    InventoryMismatch { probe: usize, inventory: usize },
    #[error("invalid probe config: {0}")]
    BadProbeConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), line, message: message.into() }
    }

    /// True when the failure came from the filesystem rather than from the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
