use std::fmt;

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Bad flags, config or parameter values.
    Validation,
    /// Unreadable or inconsistent input data.
    Data,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Validation,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Data,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            Kind::Validation => 2,
            Kind::Data => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<engage_core::Error> for Failure {
    fn from(e: engage_core::Error) -> Self {
        if e.is_validation() {
            Self::validation(e.to_string())
        } else {
            Self::data(e.to_string())
        }
    }
}

impl From<engage_service::ApiError> for Failure {
    fn from(e: engage_service::ApiError) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::data(e.to_string())
    }
}
