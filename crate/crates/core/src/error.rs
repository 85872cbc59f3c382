use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape")]
    TapeConsumed,

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("gradient/parameter names are misaligned: {0}")]
    NameMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown preset `{name}` (available: {available})")]
    UnknownPreset { name: String, available: String },

    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        log: Box<crate::training::TrainLog>,
    },

    #[error("checkpoint decode failed at byte offset {offset}: {msg}")]
    Checkpoint { offset: usize, msg: String },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        msg: msg.into(),
    }
}
