use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value produced in layer `{layer}`")]
    NonFinite { layer: String },

    #[error("unknown layer kind `{kind}` for layer `{layer}`")]
    UnknownLayerKind { layer: String, kind: String },

    #[error("shape error in layer `{layer}`: {message}")]
    Shape { layer: String, message: String },

    #[error("cycle detected involving layers: {}", .0.join(" -> "))]
    Cycle(Vec<String>),

    #[error("layer `{layer}` references unknown layer `{missing}`")]
    DanglingReference { layer: String, missing: String },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("malformed model document: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error(
        "zero pre-activation in layer `{layer}` while using the simple rule; \
         the epsilon rule avoids this division by zero"
    )]
    ZeroDenominator { layer: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
