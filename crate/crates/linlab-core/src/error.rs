use alloc::string::String;
use core::fmt;

/// Errors shared by every module in the core crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A caller-supplied argument violates a documented precondition.
    InvalidArgument(String),
    /// An iterative method ran out of iterations; carries the last estimate.
    ConvergenceFailure { last: f64, iterations: usize },
    /// The input is structurally valid but the quantity is undefined on it
    /// (e.g. a ratio with a zero denominator, or zero trials).
    DegenerateInput(String),
    /// A non-finite value appeared where the computation requires finiteness.
    NumericFailure(String),
    /// The requested activation is not twice differentiable and injective.
    UnsupportedActivation(String),
    /// A structural invariant (e.g. disjoint parameter slices) was violated.
    InvariantViolation(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::ConvergenceFailure { last, iterations } => write!(
                f,
                "no convergence after {iterations} iterations (last estimate {last})"
            ),
            Error::DegenerateInput(msg) => write!(f, "degenerate input: {msg}"),
            Error::NumericFailure(msg) => write!(f, "numeric failure: {msg}"),
            Error::UnsupportedActivation(msg) => write!(f, "unsupported activation: {msg}"),
            Error::InvariantViolation(msg) => write!(f, "invariant violation: {msg}"),
        }
    }
}

#[cfg(test)]
impl std::error::Error for Error {}
