use std::fmt;

use sl4d_core::Error;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// An error plus the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub source: anyhow::Error,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn usage(msg: impl fmt::Display) -> CliError {
    CliError {
        code: EXIT_USAGE,
        source: anyhow::anyhow!("{msg}"),
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.source)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Domain(_) | Error::Config(_) | Error::Parse { .. } => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            source: e.into(),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        Self {
            code: EXIT_RUNTIME,
            source: e,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

/// Failures while reading inputs are the caller's fault.
pub trait InputContext<T> {
    fn input(self, what: &str) -> CliResult<T>;
}

impl<T> InputContext<T> for sl4d_core::Result<T> {
    fn input(self, what: &str) -> CliResult<T> {
        self.map_err(|e| CliError {
            code: EXIT_USAGE,
            source: anyhow::Error::from(e).context(format!("reading {what}")),
        })
    }
}
