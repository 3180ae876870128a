use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Failure of a request, reported to clients as `{"error": {"code", "message"}}`.
#[derive(Debug, Error)]
pub enum ApiError {
    #[error("unknown scene '{0}'")]
    UnknownScene(String),
    #[error("{0}")]
    MalformedPose(String),
    #[error("image {width}x{height} exceeds the limit of {max_pixels} pixels")]
    OversizeImage {
        width: usize,
        height: usize,
        max_pixels: usize,
    },
    #[error("{0}")]
    InvalidRequest(String),
    #[error("render failed: {0}")]
    RenderFailed(String),
}

impl ApiError {
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::UnknownScene(_) => "unknown_scene",
            ApiError::MalformedPose(_) => "malformed_pose",
            ApiError::OversizeImage { .. } => "oversize_image",
            ApiError::InvalidRequest(_) => "invalid_request",
            ApiError::RenderFailed(_) => "render_failed",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::UnknownScene(_) => StatusCode::NOT_FOUND,
            ApiError::OversizeImage { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            ApiError::RenderFailed(_) => StatusCode::INTERNAL_SERVER_ERROR,
            ApiError::MalformedPose(_) | ApiError::InvalidRequest(_) => StatusCode::BAD_REQUEST,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    pub error: ErrorBody,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorEnvelope {
            error: ErrorBody {
                code: self.code().to_string(),
                message: self.to_string(),
            },
        };
        (self.status(), Json(body)).into_response()
    }
}

/// Errors that prevent the service from starting.
#[derive(Debug, Error)]
pub enum StartupError {
    #[error("cannot read scene directory {path}: {source}")]
    ScenesDir {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Serve(#[source] std::io::Error),
}
