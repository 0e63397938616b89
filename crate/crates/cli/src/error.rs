use softcbm_core::CoreError;
use softcbm_service::ServiceError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Service(#[from] ServiceError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Core(_) => "core",
            Self::Service(_) => "service",
            Self::Io(_) => "io",
            Self::Json(_) => "json",
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        let message = self.to_string().replace('\n', " ");
        serde_json::json!({ "error": self.kind(), "message": message.trim() }).to_string()
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
