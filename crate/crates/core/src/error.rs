use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid layer {layer}: {reason}")]
    InvalidLayer { layer: usize, reason: String },

    #[error("shape mismatch at layer {layer}: {reason}")]
    ShapeMismatch { layer: usize, reason: String },

    #[error("index {index} out of range (limit {limit})")]
    OutOfRange { index: usize, limit: usize },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}` has dims {found:?}, expected {expected:?}")]
    TensorDims {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("invalid fixed-point format: width {width}, fraction {fraction}")]
    InvalidFormat { width: u32, fraction: u32 },

    #[error("layer {layer} is unschedulable: {reason}")]
    Unschedulable { layer: usize, reason: String },

    #[error("unsupported network structure: {0}")]
    Unsupported(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{stage}: {cause}")]
    Stage {
        stage: &'static str,
        cause: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps `self` with the name of the pipeline stage that failed.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            cause: Box::new(self),
        }
    }
}
