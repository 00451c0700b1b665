//! Command-line front end: flag and config parsing, experiment dispatch and
//! atomic artifact output.

mod args;
mod exec;
mod output;

use std::fmt;

pub use args::{parse, parse_with_env, Action, Command, DEFAULT_OUT_DIR, SEED_ENV};
pub use exec::{execute, execute_to};
pub use output::{read_vector, write_atomic};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_ASSERTION: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Rejected by the flag parser (also carries `--help` and `--version`).
    Clap(clap::Error),
    Usage(String),
    Io(String),
    /// A checked property of the run did not hold.
    Assertion(String),
    Core(graffiti_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use graffiti_core::Error as E;
        match self {
            CliError::Clap(e) if !e.use_stderr() => EXIT_OK,
            CliError::Clap(_) | CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) | CliError::Core(E::Io(_)) => EXIT_IO,
            CliError::Assertion(_) | CliError::Core(E::TheoremViolation(_)) => EXIT_ASSERTION,
            CliError::Core(_) => EXIT_USAGE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Clap(e) => write!(f, "{e}"),
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Assertion(m) => write!(f, "assertion failed: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<graffiti_core::Error> for CliError {
    fn from(e: graffiti_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
