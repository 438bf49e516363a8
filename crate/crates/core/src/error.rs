use thiserror::Error;

pub type Result<T> = std::result::Result<T, OdpError>;

#[derive(Debug, Error)]
pub enum OdpError {
    /// Shapes, dimensions or values the callee cannot accept.
    #[error("rejected input: {0}")]
    InvalidInput(String),

    /// A configuration key failed validation.
    #[error("{key} {constraint}")]
    Config { key: String, constraint: String },

    /// Malformed checkpoint or buffer file.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A loss or TD target became non-finite.
    #[error("training diverged during {stage} at update {update}: {detail}")]
    Divergence {
        stage: String,
        update: u64,
        detail: String,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl OdpError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        OdpError::InvalidInput(msg.into())
    }

    pub fn config(key: impl Into<String>, constraint: impl Into<String>) -> Self {
        OdpError::Config {
            key: key.into(),
            constraint: constraint.into(),
        }
    }

    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        OdpError::Format {
            offset,
            message: message.into(),
        }
    }
}
