use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use rrc_core::datastore::DatastoreError;
use rrc_core::evalservice::QueueError;
use rrc_core::geometry::GeometryError;
use rrc_core::ingest::ValidationReport;
use rrc_core::taskdef::TaskError;
use rrc_core::workflow::WorkflowError;
use serde_json::{json, Map, Value};

use crate::auth::AuthError;

/// JSON error body `{"error": code, "message": ..., ...extra}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    pub extra: Map<String, Value>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.to_string(),
            message: message.into(),
            extra: Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: Value) -> Self {
        self.extra.insert(key.to_string(), value);
        self
    }

    pub fn unauthorized() -> Self {
        ApiError::new(StatusCode::UNAUTHORIZED, "Unauthorized", "authentication required")
    }

    pub fn forbidden(msg: impl Into<String>) -> Self {
        ApiError::new(StatusCode::FORBIDDEN, "Forbidden", msg)
    }

    pub fn not_found(msg: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "NotFound", msg)
    }

    pub fn bad_request(code: &str, msg: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, code, msg)
    }

    pub fn internal(msg: impl std::fmt::Display) -> Self {
        tracing::error!(error = %msg, "internal error");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", msg.to_string())
    }

    /// Early rejection of a submission: the full report, errors on top.
    pub fn invalid_submission(report: &ValidationReport) -> Self {
        let mut e = ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "ValidationFailed",
            format!("submission rejected with {} errors", report.errors.len()),
        );
        if let Value::Object(m) = serde_json::to_value(report).expect("report serializes") {
            e.extra = m;
        }
        e
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = Map::new();
        body.insert("error".into(), Value::String(self.code));
        body.insert("message".into(), Value::String(self.message));
        body.extend(self.extra);
        (self.status, Json(Value::Object(body))).into_response()
    }
}

impl From<DatastoreError> for ApiError {
    fn from(e: DatastoreError) -> Self {
        use DatastoreError::*;
        let (status, code) = match &e {
            DuplicateId(_) => (StatusCode::CONFLICT, "DuplicateId"),
            InvalidSlug(_) => (StatusCode::BAD_REQUEST, "InvalidSlug"),
            NoSuchCollection(_) => (StatusCode::NOT_FOUND, "NoSuchCollection"),
            UnknownImage(_) => (StatusCode::NOT_FOUND, "UnknownImage"),
            UndecodableImage(_) => (StatusCode::BAD_REQUEST, "UndecodableImage"),
            StaleHead { .. } => (StatusCode::CONFLICT, "StaleHead"),
            InvalidTree { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "InvalidTree"),
            NoSuchRevision { .. } => (StatusCode::NOT_FOUND, "NoSuchRevision"),
            Forbidden(_) => (StatusCode::FORBIDDEN, "Forbidden"),
            UnknownSubset(_) => (StatusCode::BAD_REQUEST, "UnknownSubset"),
            InvalidMask(_) => (StatusCode::BAD_REQUEST, "InvalidMask"),
            LastAdmin => (StatusCode::CONFLICT, "LastAdmin"),
            Corrupt { .. } | Injected(_) | Io(_) => return ApiError::internal(e),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<WorkflowError> for ApiError {
    fn from(e: WorkflowError) -> Self {
        use WorkflowError::*;
        let e = match e {
            Datastore(d) => return d.into(),
            other => other,
        };
        let (status, code) = match &e {
            AlreadyReservedByOther { holder, expiry } => {
                return ApiError::new(StatusCode::CONFLICT, "AlreadyReservedByOther", e.to_string())
                    .with("holder", json!(holder))
                    .with("expiry", json!(expiry))
            }
            NotEligible(_) => (StatusCode::CONFLICT, "NotEligible"),
            NotReservedByYou => (StatusCode::CONFLICT, "NotReservedByYou"),
            StaleReservation => (StatusCode::CONFLICT, "StaleReservation"),
            NoAnnotationSaved => (StatusCode::CONFLICT, "NoAnnotationSaved"),
            Forbidden(_) => (StatusCode::FORBIDDEN, "Forbidden"),
            CommentRequired => (StatusCode::BAD_REQUEST, "CommentRequired"),
            WrongState(_) => (StatusCode::CONFLICT, "WrongState"),
            InvalidDuration => (StatusCode::BAD_REQUEST, "InvalidDuration"),
            InvalidRating => (StatusCode::BAD_REQUEST, "InvalidRating"),
            NoWords => (StatusCode::CONFLICT, "NoWords"),
            NothingEligible => (StatusCode::NOT_FOUND, "NothingEligible"),
            StageOrderViolation => (StatusCode::CONFLICT, "StageOrderViolation"),
            UnknownNode(_) => (StatusCode::NOT_FOUND, "UnknownNode"),
            Geometry(g) => (StatusCode::BAD_REQUEST, g.code()),
            Datastore(_) | Io(_) => return ApiError::internal(e),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<TaskError> for ApiError {
    fn from(e: TaskError) -> Self {
        use TaskError::*;
        let e = match e {
            Datastore(d) => return d.into(),
            other => other,
        };
        let (status, code) = match &e {
            BadParams { .. } => (StatusCode::BAD_REQUEST, "BadParams"),
            UnresolvableGT(_) => (StatusCode::BAD_REQUEST, "UnresolvableGT"),
            InvalidId(_) => (StatusCode::BAD_REQUEST, "InvalidId"),
            DuplicateTask(_) => (StatusCode::CONFLICT, "DuplicateTask"),
            NoSuchTask(_) => (StatusCode::NOT_FOUND, "NoSuchTask"),
            NotFrozen => (StatusCode::CONFLICT, "NotFrozen"),
            NoSuchEvaluation(_) => (StatusCode::NOT_FOUND, "NoSuchEvaluation"),
            SequesteredLeak => (StatusCode::FORBIDDEN, "SequesteredLeak"),
            Datastore(_) | CorruptSnapshot(_) | Io(_) => return ApiError::internal(e),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<QueueError> for ApiError {
    fn from(e: QueueError) -> Self {
        match &e {
            QueueError::NotValidated(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "NotValidated", e.to_string()),
            QueueError::LeaseExpired(_) => ApiError::new(StatusCode::CONFLICT, "LeaseExpired", e.to_string()),
            QueueError::NoSuchSubmission(_) => ApiError::new(StatusCode::NOT_FOUND, "NoSuchSubmission", e.to_string()),
            QueueError::Corrupt { .. } | QueueError::Io(_) => ApiError::internal(e),
        }
    }
}

impl From<AuthError> for ApiError {
    fn from(e: AuthError) -> Self {
        let (status, code) = match &e {
            AuthError::EmailTaken(_) => (StatusCode::CONFLICT, "EmailTaken"),
            AuthError::InvalidEmail => (StatusCode::BAD_REQUEST, "InvalidEmail"),
            AuthError::WeakPassword => (StatusCode::BAD_REQUEST, "WeakPassword"),
            AuthError::InvalidName => (StatusCode::BAD_REQUEST, "InvalidName"),
            AuthError::BadCredentials => (StatusCode::UNAUTHORIZED, "BadCredentials"),
            AuthError::Hash(_) | AuthError::Io(_) | AuthError::Corrupt(_) => return ApiError::internal(e),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<GeometryError> for ApiError {
    fn from(e: GeometryError) -> Self {
        ApiError::bad_request(e.code(), e.to_string())
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        ApiError::internal(e)
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
