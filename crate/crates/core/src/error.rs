use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DType {
        expected: crate::tensor::DType,
        found: crate::tensor::DType,
    },

    #[error("invalid block spec: {0}")]
    Block(String),

    #[error("invalid network spec: {0}")]
    Spec(String),

    #[error("spec file line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown architecture `{0}` (built-ins: asymmnet-l, asymmnet-s, pruned-l, pruned-s, mbv3-l, mbv3-s, mbv1, mbv2)")]
    UnknownArch(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{0}")]
    Domain(String),

    #[error("weight file: {0}")]
    WeightFile(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
