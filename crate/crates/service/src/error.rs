use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use erase_core::Error;
use serde::{Deserialize, Serialize};

/// Error body: `{"error": {"code": ..., "message": ...}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
            },
        }
    }

    pub fn invalid(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    pub fn not_found(what: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("{what} not found"),
        )
    }
}

/// Machine-readable code for a core error.
pub fn error_code(e: &Error) -> &'static str {
    match e {
        Error::Shape(_) => "shape_mismatch",
        Error::Invalid(_) => "invalid_input",
        Error::Degenerate(_) => "degenerate_labels",
        Error::Transport { .. } => "client_transport",
        Error::Parse { .. } => "client_parse",
        Error::NonFinite { .. } => "numerical",
        Error::AlreadyMerged => "already_merged",
        Error::Wire(_) => "backbone_wire",
        Error::Io { .. } => "io",
        Error::Image(_) => "bad_image",
        Error::Json(_) => "bad_json",
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Transport { .. } | Error::Parse { .. } | Error::Wire(_) => {
                StatusCode::BAD_GATEWAY
            }
            Error::NonFinite { .. } | Error::AlreadyMerged | Error::Io { .. } => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, error_code(&e), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.body }))).into_response()
    }
}
