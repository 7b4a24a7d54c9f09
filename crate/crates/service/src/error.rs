use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use morphscope_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("startup failed: {0}")]
    Startup(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Argument(String),
    /// The request is valid but the session is not ready for it.
    #[error("{0}")]
    State(String),
    /// A checkpoint or data file is missing, damaged, or inconsistent.
    #[error("{0}")]
    Dependency(String),
    #[error("{0}")]
    Internal(String),
}

/// Body of every non-2xx response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Startup(_) | ServiceError::Internal(_) => "internal",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Argument(_) => "invalid_argument",
            ServiceError::State(_) => "invalid_state",
            ServiceError::Dependency(_) => "dependency",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::Startup(_) | ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Argument(_) => StatusCode::BAD_REQUEST,
            ServiceError::State(_) => StatusCode::CONFLICT,
            ServiceError::Dependency(_) => StatusCode::FAILED_DEPENDENCY,
        }
    }
}

impl From<CoreError> for ServiceError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Argument(_) | CoreError::Shape { .. } => ServiceError::Argument(e.to_string()),
            CoreError::Io { .. }
            | CoreError::NotFound(_)
            | CoreError::Format(_)
            | CoreError::Corruption(_)
            | CoreError::Checkpoint(_)
            | CoreError::Consistency(_) => ServiceError::Dependency(e.to_string()),
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        if matches!(self, ServiceError::Internal(_)) {
            log::error!("{self}");
        }
        let body = ErrorBody {
            code: self.code().to_string(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}
