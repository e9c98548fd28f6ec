use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

use fairflow::analyzer::{AnalyzerError, RegistryError};
use fairflow::db::DbError;
use fairflow::forms::FormsError;
use fairflow::repo::RepoError;
use fairflow::services::RemoteError;

/// An error body `{"error_code": ..., "message": ...}` with its status.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

fn status_for(code: &str) -> StatusCode {
    match code {
        "UNAUTHORIZED" => StatusCode::UNAUTHORIZED,
        "NOT_ADMIN" | "FORBIDDEN_GROUP" => StatusCode::FORBIDDEN,
        "CONFLICT" | "DUPLICATE_NAME" | "SUBFOLDER_TAKEN" | "DUPLICATE_ID" | "ILLEGAL_TRANSITION" => {
            StatusCode::CONFLICT
        }
        "STORE_ERROR" | "IO_ERROR" | "FATAL_CONFIG" => StatusCode::INTERNAL_SERVER_ERROR,
        c if c.starts_with("UNKNOWN_") || c == "NOT_FOUND" => StatusCode::NOT_FOUND,
        _ => StatusCode::BAD_REQUEST,
    }
}

impl ApiError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        ApiError { status: status_for(code), code: code.to_string(), message: message.into() }
    }

    pub fn unauthorized() -> Self {
        Self::new("UNAUTHORIZED", "missing or unknown bearer token")
    }

    pub fn not_admin(user: &str) -> Self {
        Self::new("NOT_ADMIN", format!("{user} is not an admin"))
    }

    pub fn forbidden_group(group: &str) -> Self {
        Self::new("FORBIDDEN_GROUP", format!("no access to group {group}"))
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new("BAD_REQUEST", message)
    }

    pub fn fatal_config(message: impl Into<String>) -> Self {
        Self::new("FATAL_CONFIG", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error_code": self.code, "message": self.message }))).into_response()
    }
}

macro_rules! coded {
    ($($ty:ty),*) => {$(
        impl From<$ty> for ApiError {
            fn from(err: $ty) -> Self {
                ApiError::new(err.code(), err.to_string())
            }
        }
    )*};
}

coded!(DbError, RepoError, FormsError, AnalyzerError, RegistryError, RemoteError);

impl From<axum::extract::rejection::JsonRejection> for ApiError {
    fn from(err: axum::extract::rejection::JsonRejection) -> Self {
        ApiError::bad_request(err.body_text())
    }
}

impl From<axum::extract::rejection::QueryRejection> for ApiError {
    fn from(err: axum::extract::rejection::QueryRejection) -> Self {
        ApiError::bad_request(err.body_text())
    }
}
