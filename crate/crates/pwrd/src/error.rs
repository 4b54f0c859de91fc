use pwrd_core::ErrorClass;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] pwrd_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Input(String),
    #[error("input `{0}` changed since the manifest was written")]
    ChecksumMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Process exit status for each failure class.
pub mod exit_code {
    pub const SUCCESS: i32 = 0;
    pub const VALIDATION: i32 = 2;
    pub const DEGENERATE: i32 = 3;
    pub const NUMERICAL: i32 = 4;
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(e) => match e.class() {
                ErrorClass::Validation => exit_code::VALIDATION,
                ErrorClass::Degenerate => exit_code::DEGENERATE,
                ErrorClass::Numerical => exit_code::NUMERICAL,
            },
            _ => exit_code::VALIDATION,
        }
    }
}
