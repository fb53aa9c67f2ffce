use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("shape mismatch at node `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },

    #[error("leaf `{0}` is not bound")]
    UnboundLeaf(String),

    #[error("`{0}` is not a leaf of this graph")]
    UnknownLeaf(String),

    #[error("`{0}` is not an output of this graph")]
    UnknownOutput(String),

    #[error("output `{output}` has {len} elements; select one to differentiate")]
    NonScalarOutput { output: String, len: usize },

    #[error("non-finite value produced at node `{0}`")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("input rejected: {0}")]
    InvalidInput(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("method `{method}` is not supported here: {reason}")]
    UnsupportedMethod { method: String, reason: String },

    #[error("gradient evaluation failed at IG step {step}: {source}")]
    IgStep { step: usize, source: Box<Error> },

    #[error("stage {stage}, trial {trial}, input {input}: {source}")]
    HarnessCell {
        stage: usize,
        trial: usize,
        input: usize,
        source: Box<Error>,
    },

    #[error("bad magic number {found} (expected {expected})")]
    BadMagic { expected: u32, found: u32 },

    #[error("malformed data file: {0}")]
    Format(String),

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
