use ccforecast_core::Error as CoreError;

/// Failures surfaced by the CLI and the HTTP API.
#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown {kind} `{id}`")]
    NotFound { kind: &'static str, id: String },
    #[error("{message}")]
    Invalid { field: Option<String>, message: String },
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Registry(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl ServiceError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ServiceError::Invalid {
            field: Some(field.into()),
            message: message.into(),
        }
    }

    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound { .. } => "not_found",
            ServiceError::Invalid { .. } => "invalid_request",
            ServiceError::Conflict(_) => "fingerprint_mismatch",
            ServiceError::Registry(_) => "registry_error",
            ServiceError::Core(e) => match e {
                CoreError::FingerprintMismatch { .. } => "fingerprint_mismatch",
                CoreError::UndefinedImpact { .. } => "undefined_impact",
                CoreError::InvalidArgument(_)
                | CoreError::InsufficientData(_)
                | CoreError::UnknownName(_)
                | CoreError::Config(_)
                | CoreError::SplitTooSmall(_) => "invalid_request",
                CoreError::Checksum { .. } | CoreError::Version { .. } | CoreError::Corrupt(_) => "corrupt_artifact",
                _ => "internal_error",
            },
        }
    }
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;
