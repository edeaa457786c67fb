use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use graspcue_core::scenario::ScenarioError;
use graspcue_core::tov::TovError;
use serde_json::{json, Value};

use crate::views::DeltaCap;

/// Error reply: a status plus a JSON body with at least `error`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, body: json!({ "error": message.into() }) }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    pub fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    pub fn over_cap(cap: DeltaCap, translation: f64, rotation: f64) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: json!({
                "error": format!("delta exceeds the cap ({translation:.4} m, {rotation:.4} rad)"),
                "cap": cap,
            }),
        }
    }

    /// Unreachable or otherwise unusable poses.
    pub fn numerical(err: TovError) -> Self {
        Self::unprocessable(err.to_string())
    }

    pub fn scenario(err: ScenarioError) -> Self {
        match err {
            ScenarioError::Unknown(_) => Self::not_found(err.to_string()),
            other => Self::unprocessable(other.to_string()),
        }
    }

    pub fn gone() -> Self {
        Self::new(StatusCode::GONE, "session closed")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}
