use thiserror::Error;

/// Error type shared by every pipeline stage.
#[derive(Error, Debug)]
pub enum AliError {
    /// Invalid configuration value (bad dimensions, empty primitive set, ...).
    #[error("config: {0}")]
    Config(String),

    /// A caller violated an operation contract (shape mismatch, out-of-range t, ...).
    #[error("contract: {0}")]
    Contract(String),

    /// A required prerequisite is missing (e.g. training stages run out of order).
    #[error("precondition: {0}")]
    Precondition(String),

    /// Training diverged or a frozen parameter group was mutated.
    #[error("training: {0}")]
    Training(String),

    /// An evaluation protocol could not be assembled (insufficient references, ...).
    #[error("protocol: {0}")]
    Protocol(String),

    /// Numerical oracle failure (non-finite values where finiteness is required).
    #[error("numeric: {0}")]
    Numeric(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("serde: {0}")]
    Serde(String),
}

impl AliError {
    /// Short machine-parsable code, stable across releases.
    pub fn code(&self) -> &'static str {
        match self {
            AliError::Config(_) => "config",
            AliError::Contract(_) => "contract",
            AliError::Precondition(_) => "precondition",
            AliError::Training(_) => "training",
            AliError::Protocol(_) => "protocol",
            AliError::Numeric(_) => "numeric",
            AliError::Io(_) => "io",
            AliError::Image(_) => "image",
            AliError::Serde(_) => "serde",
        }
    }
}

impl From<serde_json::Error> for AliError {
    fn from(e: serde_json::Error) -> Self {
        AliError::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, AliError>;
