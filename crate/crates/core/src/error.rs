use thiserror::Error;

pub type Result<T> = std::result::Result<T, DlspfError>;

#[derive(Debug, Error)]
pub enum DlspfError {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate ensemble: {0}")]
    DegenerateEnsemble(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DlspfError {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            DlspfError::Config(_) | DlspfError::Shape(_) | DlspfError::Json(_) => 2,
            DlspfError::DegenerateEnsemble(_) => 3,
            DlspfError::Divergence(_) | DlspfError::NonFinite(_) | DlspfError::Numerical(_) => 4,
            DlspfError::Io(_) | DlspfError::Format(_) => 5,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::DlspfError::Shape(format!($($arg)*)) };
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::DlspfError::Config(format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use shape_err;
