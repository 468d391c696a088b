//! Process exit codes.

use std::fmt;

pub const VALIDATION: u8 = 1;
pub const UPSTREAM_MISSING: u8 = 2;
pub const BACKEND: u8 = 3;
pub const SHORTFALL: u8 = 4;

/// An error carrying the exit code it should end the process with.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn validation(error: anyhow::Error) -> Self {
        Failure { code: VALIDATION, error }
    }

    pub fn upstream(error: anyhow::Error) -> Self {
        Failure {
            code: UPSTREAM_MISSING,
            error,
        }
    }

    pub fn backend(error: anyhow::Error) -> Self {
        Failure { code: BACKEND, error }
    }

    pub fn shortfall(error: anyhow::Error) -> Self {
        Failure { code: SHORTFALL, error }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::validation(e.into())
    }
}

impl fmt::Debug for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "exit {}: {:#}", self.code, self.error)
    }
}
