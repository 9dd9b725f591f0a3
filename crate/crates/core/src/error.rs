use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not fit the primitive.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A primitive was evaluated outside its numeric domain.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// The tape was asked for something it has not evaluated.
    #[error("tape state error: {0}")]
    State(String),

    /// The caller violated an operation precondition.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    /// A persisted artifact failed validation.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("policy warm-up reached validity rate {rate:.3} < 0.5; increase warmup epochs or demo count")]
    WarmupFailed { rate: f64 },

    /// A command needs an artifact produced by another command.
    #[error("missing prerequisite {artifact}; run `{command}` first")]
    MissingPrerequisite { artifact: PathBuf, command: &'static str },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn usage(detail: impl Into<String>) -> Self {
        Error::Usage(detail.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Domain { .. } => "domain",
            Error::State(_) => "state",
            Error::Usage(_) => "usage",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::WarmupFailed { .. } => "warmup_failed",
            Error::MissingPrerequisite { .. } => "missing_prerequisite",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
