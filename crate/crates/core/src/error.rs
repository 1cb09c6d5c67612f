use std::fmt;

/// Error type shared across the crate.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not conform for the requested operation.
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    /// An operation produced NaN or Inf.
    NonFinite { op: &'static str },
    /// Argument outside its documented domain.
    InvalidArg(String),
    /// Diffusion time outside [eps_min, T].
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },
    /// A quantity became too small/large to continue (e.g. alpha_t below 1e-8).
    Degenerate(String),
    /// Training loss went non-finite; the offending term is named.
    Diverged { term: &'static str, step: u64 },
    /// Malformed container, config file, or operator spec.
    Format(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, expected, got } => {
                write!(f, "{op}: shape mismatch (expected {expected}, got {got})")
            }
            Error::NonFinite { op } => write!(f, "{op}: non-finite output"),
            Error::InvalidArg(msg) => write!(f, "invalid argument: {msg}"),
            Error::TimeOutOfRange { t, lo, hi } => {
                write!(f, "time {t} outside [{lo}, {hi}]")
            }
            Error::Degenerate(msg) => write!(f, "degenerate value: {msg}"),
            Error::Diverged { term, step } => {
                write!(f, "loss diverged at step {step} (non-finite {term} term)")
            }
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
