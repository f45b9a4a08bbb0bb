//! One error type for the API and the CLI, with its HTTP status and exit code.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use dpexplore::curator::CuratorError;
use dpexplore::intent::IntentError;
use dpexplore::recommender::RecommendError;
use dpexplore::schema::SchemaError;
use dpexplore::session::SessionError;
use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Budget,
    ProgressFloor,
    NotFound,
    Conflict,
    Io,
}

impl ErrorKind {
    pub fn status(self) -> StatusCode {
        match self {
            ErrorKind::Validation => StatusCode::BAD_REQUEST,
            ErrorKind::Budget => StatusCode::PAYMENT_REQUIRED,
            ErrorKind::ProgressFloor | ErrorKind::Conflict => StatusCode::CONFLICT,
            ErrorKind::NotFound => StatusCode::NOT_FOUND,
            ErrorKind::Io => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Budget => 3,
            ErrorKind::Io => 4,
            _ => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ErrorKind::Validation => "validation",
            ErrorKind::Budget => "budget_exceeded",
            ErrorKind::ProgressFloor => "progress_below_floor",
            ErrorKind::NotFound => "not_found",
            ErrorKind::Conflict => "conflict",
            ErrorKind::Io => "io",
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct AppError {
    pub kind: ErrorKind,
    pub message: String,
}

impl AppError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Validation, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::NotFound, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Io, message)
    }
}

impl From<SessionError> for AppError {
    fn from(e: SessionError) -> Self {
        let kind = match &e {
            SessionError::Curator(CuratorError::BudgetExceeded { .. }) => ErrorKind::Budget,
            SessionError::Intent(IntentError::ProgressBelowFloor { .. }) => ErrorKind::ProgressFloor,
            SessionError::UnknownResponse(_) => ErrorKind::NotFound,
            SessionError::Io { .. } | SessionError::Corrupt(_) | SessionError::Version { .. } => ErrorKind::Io,
            _ => ErrorKind::Validation,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<SchemaError> for AppError {
    fn from(e: SchemaError) -> Self {
        let kind = match e {
            SchemaError::MalformedFile { .. } => ErrorKind::Io,
            _ => ErrorKind::Validation,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<RecommendError> for AppError {
    fn from(e: RecommendError) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        (self.kind.status(), Json(json!({ "error": self.kind.name(), "message": self.message }))).into_response()
    }
}
