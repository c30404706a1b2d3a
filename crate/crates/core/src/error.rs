use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("budget exceeded: {what} needs {needed}, budget is {budget}")]
    BudgetExceeded { what: &'static str, needed: f64, budget: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("acceptance starved: {accepted} of {attempts} draws accepted")]
    AcceptanceStarved { accepted: u64, attempts: u64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("no convergence within schedule (last gap {gap:e}, last value {value})")]
    NoConvergence { gap: f64, value: f64 },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("degenerate interval: lo = hi = {0}")]
    DegenerateInterval(i64),

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidModel(_) => "invalid_model",
            Error::InvalidConfig(_) => "invalid_config",
            Error::BudgetExceeded { .. } => "budget_exceeded",
            Error::Precondition(_) => "precondition",
            Error::AcceptanceStarved { .. } => "acceptance_starved",
            Error::InsufficientData(_) => "insufficient_data",
            Error::NoConvergence { .. } => "no_convergence",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::OutOfRange(_) => "out_of_range",
            Error::DegenerateInterval(_) => "degenerate_interval",
            Error::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
