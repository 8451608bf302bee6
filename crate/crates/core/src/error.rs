use thiserror::Error;

pub type Result<T, E = LiarError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LiarError {
    #[error("index error: {0}")]
    Index(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("underdetermined design: {rows} rows for {cols} unknowns ({context})")]
    Underdetermined {
        rows: usize,
        cols: usize,
        context: String,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("unstable kernels: operator norm {norm} >= 1")]
    Stability { norm: f64 },

    #[error("structure error: {0}")]
    Structure(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LiarError {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        LiarError::Format {
            offset,
            message: message.into(),
        }
    }

    /// Process exit code for each failure class, used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            LiarError::Config(_) => 2,
            LiarError::Io(_) => 3,
            LiarError::Format { .. } | LiarError::Json(_) => 4,
            LiarError::Numerical(_) | LiarError::Stability { .. } => 5,
            LiarError::Underdetermined { .. } | LiarError::Structure(_) => 6,
            LiarError::Index(_) | LiarError::Size(_) => 7,
        }
    }
}
