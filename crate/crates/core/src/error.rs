use alloc::string::String;

/// Failure modes shared by every module in the crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A time argument fell outside the valid range of an SDE.
    #[error("time {t} outside the valid range [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },

    /// A precondition on arguments was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    /// A NaN or infinity appeared during integration or loss evaluation.
    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },

    #[error("matrix is singular or not positive definite: {0}")]
    Singular(&'static str),

    /// Training loss became non-finite.
    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        })
    }
}
