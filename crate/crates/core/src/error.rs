use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("k = {k} exceeds the {distinct} distinct descriptors available")]
    DegenerateK { k: usize, distinct: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("elements span multiple layers ({0} and {1})")]
    LayerMismatch(usize, usize),
    #[error("layer {layer} must be learned with {required} scope")]
    ScopeViolation { layer: usize, required: &'static str },
    #[error("no candidate composition reached the minimum support at layer {0}")]
    InsufficientData(usize),
    #[error("hierarchy has no learned layers above layer 0")]
    UnlearnedHierarchy,
    #[error("detections are missing layer {0}")]
    MissingLayer(usize),
    #[error("quadratic deformation coefficient {0} is below the convexity floor")]
    NonConvexWeights(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("placement out of bounds: {0}")]
    OutOfBounds(String),
    #[error("feature configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("no placement overlaps the annotated volume of video {0}")]
    NoFeasiblePlacement(String),
    #[error("weight norm {norm} exceeded the divergence bound {bound}")]
    DivergenceDetected { norm: f64, bound: f64 },
    #[error("no positive examples with annotated volumes")]
    EmptyPositives,
    #[error("at least two classes are required, found {0}")]
    SingleClass(usize),
    #[error("no negative videos to measure false positives")]
    NoNegatives,
    #[error("no annotated frames")]
    NoAnnotatedFrames,
    #[error("empty test set")]
    EmptyTestSet,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("artifact {artifact} has config hash {found}, current config hash is {expected}")]
    HashMismatch {
        artifact: String,
        expected: String,
        found: String,
    },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Error::Io(e.into())
        } else {
            Error::Format(e.to_string())
        }
    }
}
