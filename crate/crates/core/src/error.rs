use softcbm_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("concept index {index} out of range for {k} concepts")]
    Index { index: usize, k: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    /// Short stable identifier, used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            CoreError::Tensor(TensorError::Shape { .. }) => "dimension",
            CoreError::Tensor(TensorError::Format { .. }) | CoreError::Format { .. } => "format",
            CoreError::Tensor(TensorError::Io(_)) | CoreError::Io(_) => "io",
            CoreError::Tensor(_) => "tensor",
            CoreError::Param(_) => "parameter",
            CoreError::Data(_) => "data",
            CoreError::Config(_) => "configuration",
            CoreError::Index { .. } => "index",
            CoreError::State(_) => "state",
            CoreError::Undefined(_) => "undefined",
            CoreError::Json(_) => "json",
        }
    }
}
