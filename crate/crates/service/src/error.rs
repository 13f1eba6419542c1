//! JSON error bodies: `{"error": {"code", "member", "message"}}`.

use std::fmt;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::json;

use persview::io::BundleError;
use persview::pipeline::PipelineError;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub member: Option<String>,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl fmt::Display) -> Self {
        Self {
            status,
            code,
            member: None,
            message: message.to_string(),
        }
    }

    pub fn with_member(mut self, member: &str) -> Self {
        self.member = Some(member.to_string());
        self
    }

    pub fn bad_request(code: &'static str, member: Option<&str>, message: impl fmt::Display) -> Self {
        Self {
            member: member.map(str::to_string),
            ..Self::new(StatusCode::BAD_REQUEST, code, message)
        }
    }

    pub fn unprocessable(param: &str, message: impl fmt::Display) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_parameter", message).with_member(param)
    }

    pub fn upload(e: impl fmt::Display) -> Self {
        Self::bad_request("bad_upload", None, e)
    }

    pub fn internal(e: impl fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e)
    }

    pub fn bundle(e: BundleError) -> Self {
        let code = match e {
            BundleError::MissingManifest => "missing_manifest",
            BundleError::CorruptMember { .. } => "corrupt_member",
            BundleError::DimensionMismatch { .. } => "dimension_mismatch",
            BundleError::IoFailure { .. } => return Self::internal(e),
        };
        Self::bad_request(code, e.member(), &e)
    }

    /// Errors from rendering a view of a valid session.
    pub fn pipeline(e: PipelineError) -> Self {
        match &e {
            PipelineError::MissingGenerated => Self::new(StatusCode::CONFLICT, "missing_generated", &e).with_member("generated"),
            // angles are checked before rendering, so camera failures come from the distance
            PipelineError::View(_) | PipelineError::Camera(_) => Self::unprocessable("tz", &e),
            _ if e.is_validation() => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_parameter", &e),
            _ => Self::internal(&e),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "error": {
                "code": self.code,
                "member": self.member,
                "message": self.message,
            }
        });
        (self.status, Json(body)).into_response()
    }
}
