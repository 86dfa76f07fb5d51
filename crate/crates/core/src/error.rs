use thiserror::Error;

/// Errors produced by the pricing library.
///
/// Variants are split into input/validation problems and computation
/// failures so that callers (the CLI in particular) can map them onto
/// distinct exit codes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("record {record} is missing the {attribute} sensitive attribute")]
    MissingAttribute { record: usize, attribute: &'static str },

    #[error("sensitive level {index} out of range for cardinality {cardinality}")]
    LevelOutOfRange { index: usize, cardinality: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error(
        "keep probability {pi} is at or below the non-informative limit 1/{cardinality}; \
         correction matrices are singular"
    )]
    SingularNoise { pi: f64, cardinality: usize },

    #[error(
        "sensitive level {level} has no records; use a larger sample or merge levels"
    )]
    EmptyLevel { level: usize },

    #[error("training diverged for model {model} at epoch {epoch}: objective {objective}")]
    Diverged {
        model: usize,
        epoch: usize,
        objective: f64,
    },

    #[error("no informative anchor found: estimated keep probability {pi_hat} <= 1/{cardinality}")]
    NoAnchor { pi_hat: f64, cardinality: usize },

    #[error("csv: {0}")]
    Csv(String),

    #[error("codec error [{code}]: {message}")]
    Codec { code: CodecErrorCode, message: String },

    #[error("payload audit failed: column `{0}` looks like a sensitive attribute")]
    AuditFailure(String),

    #[error("io: {0}")]
    Io(String),
}

/// Distinct failure classes of the payload/result codec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecErrorCode {
    VersionMismatch,
    Truncated,
    CountMismatch,
    Malformed,
}

impl CodecErrorCode {
    pub fn code(self) -> u8 {
        match self {
            CodecErrorCode::VersionMismatch => 10,
            CodecErrorCode::Truncated => 11,
            CodecErrorCode::CountMismatch => 12,
            CodecErrorCode::Malformed => 13,
        }
    }
}

impl std::fmt::Display for CodecErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            CodecErrorCode::VersionMismatch => "version-mismatch",
            CodecErrorCode::Truncated => "truncated",
            CodecErrorCode::CountMismatch => "count-mismatch",
            CodecErrorCode::Malformed => "malformed",
        };
        write!(f, "E{} {}", self.code(), name)
    }
}

impl Error {
    /// True for errors caused by bad input rather than by a failed computation.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Diverged { .. } | Error::NoAnchor { .. } | Error::Io(_)
        )
    }

    pub(crate) fn codec(code: CodecErrorCode, message: impl Into<String>) -> Self {
        Error::Codec {
            code,
            message: message.into(),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
