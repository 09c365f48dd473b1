use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// Input is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Input is structurally degenerate (empty list, single-element vector, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Configuration is invalid or internally inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Input data failed parsing or validation.
    #[error("data error: {0}")]
    Data(String),

    /// A numerical failure occurred (NaN/overflow in the training loop).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Metric evaluation is undefined for the given inputs.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the CLI: 2 config/validation, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Csv(_) => 3,
            Error::Numerical(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
