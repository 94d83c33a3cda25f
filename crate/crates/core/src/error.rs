use thiserror::Error;

#[derive(Debug, Error)]
pub enum CtrError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("value {value} in dimension {dim} is outside the grid range [{lo}, {hi}]")]
    OutOfRange { dim: usize, value: f64, lo: f64, hi: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("undefined result: {0}")]
    Undefined(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("{file}, row {row}: {rule}")]
    Schema { file: String, row: usize, rule: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CtrError {
    /// Stable short tag used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            CtrError::Validation(_) => "validation",
            CtrError::Config(_) => "configuration",
            CtrError::OutOfRange { .. } => "out_of_range",
            CtrError::Contract(_) => "contract",
            CtrError::Undefined(_) => "undefined",
            CtrError::Diverged { .. } => "diverged",
            CtrError::Schema { .. } => "schema",
            CtrError::Io(_) => "io",
            CtrError::Csv(_) => "csv",
            CtrError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, CtrError>;

pub(crate) fn validation(msg: impl Into<String>) -> CtrError {
    CtrError::Validation(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> CtrError {
    CtrError::Config(msg.into())
}
