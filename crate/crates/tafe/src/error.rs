use thiserror::Error;

/// Error taxonomy shared by the whole crate.
///
/// The CLI maps these onto exit codes: `Shape`/`Config`/`Data`/`Usage`/`Format`/`Io`
/// are usage-class failures (exit 2), `Numeric` is a numeric abort (exit 3).
#[derive(Debug, Error)]
pub enum TafeError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TafeError>;
