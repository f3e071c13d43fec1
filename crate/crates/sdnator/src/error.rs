use std::io;

/// Failures starting or running one of the services.
#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("address {0} is already in use")]
    PortInUse(String),
    #[error("bad config key `{key}`: {reason}")]
    BadConfig { key: String, reason: String },
    #[error("backend unreachable at {addr}: {reason}")]
    BackendUnreachable { addr: String, reason: String },
    #[error("storage: {0}")]
    Storage(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ServiceError {
    pub fn bad_config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        ServiceError::BadConfig {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
