use engage_core::level::EngagementLevel;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    AwaitingLabels,
    Retraining,
    Complete,
    Aborted,
}

impl SessionStatus {
    /// Edges of the session state machine.
    pub fn may_become(self, next: SessionStatus) -> bool {
        use SessionStatus::*;
        matches!(
            (self, next),
            (AwaitingLabels, Retraining)
                | (Retraining, AwaitingLabels)
                | (Retraining, Complete)
                | (AwaitingLabels, Aborted)
                | (Retraining, Aborted)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchItem {
    pub pool_id: u64,
    pub clip_ref: String,
    pub second: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub collected: usize,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub token: String,
    pub status: SessionStatus,
    pub pending_batch: Vec<BatchItem>,
    pub progress: Progress,
    pub auroc_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResponse {
    pub token: String,
    pub status: SessionStatus,
    pub items: Vec<BatchItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub student_id: String,
    pub model_id: String,
    #[serde(default)]
    pub episodes: Option<usize>,
    #[serde(default)]
    pub batch: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelEntry {
    pub pool_id: u64,
    pub level: EngagementLevel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSubmission {
    pub labels: Vec<LabelEntry>,
}

impl LabelSubmission {
    pub fn pairs(&self) -> Vec<(u64, EngagementLevel)> {
        self.labels.iter().map(|l| (l.pool_id, l.level)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    NotFound,
    Conflict,
    Validation,
    Exhausted,
}

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code:?}: {message}")]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    /// Offending pool ids for label validation failures.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pool_ids: Vec<u64>,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            pool_ids: Vec::new(),
        }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::NotFound, message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Conflict, message)
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Validation, message)
    }

    pub fn exhausted(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::Exhausted, message)
    }

    pub fn with_pool_ids(mut self, ids: Vec<u64>) -> Self {
        self.pool_ids = ids;
        self
    }
}

impl From<engage_core::Error> for ApiError {
    fn from(e: engage_core::Error) -> Self {
        use engage_core::Error as E;
        match e {
            E::ExhaustedPool | E::InsufficientPool { .. } => Self::exhausted(e.to_string()),
            e if e.is_validation() => Self::validation(e.to_string()),
            // Anything else happened while refitting; the session is left
            // as it was and the client may retry.
            e => Self::conflict(format!("retraining failed: {e}")),
        }
    }
}
