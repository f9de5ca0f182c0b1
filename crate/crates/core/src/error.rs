use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("negative mass {0} below tolerance")]
    NegativeMass(f64),
    #[error("negative support point {0}")]
    NegativePoint(f64),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("rate family `{0}` has no analytic partials and the finite-difference fallback is disabled")]
    MissingPartials(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
