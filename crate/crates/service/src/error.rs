use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use serde_json::{json, Value};

/// Error response body: `{code, message, details}`.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorBody {
    pub code: &'static str,
    pub message: String,
    pub details: Value,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code,
                message: message.into(),
                details: Value::Null,
            },
        }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.body.details = details;
        self
    }

    pub fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} {id:?}"))
            .with_details(json!({ "kind": what, "id": id }))
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn unprocessable(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<nanolens::Error> for ApiError {
    fn from(e: nanolens::Error) -> Self {
        use nanolens::Error as E;
        match &e {
            E::DepthOutOfRange { depth, min, max } => {
                ApiError::unprocessable("invalid_depth", e.to_string())
                    .with_details(json!({ "depth": depth, "min": min, "max": max }))
            }
            E::NotConvLayer { layer } => ApiError::unprocessable("not_conv_layer", e.to_string())
                .with_details(json!({ "layer": layer })),
            E::FilterOutOfRange { layer, filter, count } => {
                ApiError::unprocessable("invalid_filter", e.to_string())
                    .with_details(json!({ "layer": layer, "filter": filter, "count": count }))
            }
            E::InvalidConfig(_) => ApiError::unprocessable("invalid_config", e.to_string()),
            E::DecodeBytes(_) => ApiError::bad_request(e.to_string()),
            _ => ApiError::internal(e.to_string()),
        }
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
