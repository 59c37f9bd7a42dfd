//! Experiment harness behind the `cliptta` binary.

pub mod commands;
pub mod config;
pub mod report;
pub mod run;

use std::fmt;

pub use config::{ConfigError, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ACCEPTANCE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Io(String),
    Core(cliptta::Error),
    /// A check the command itself performs did not hold.
    Acceptance(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use cliptta::Error as E;
        match self {
            CliError::Config(_) | CliError::Io(_) => EXIT_CONFIG,
            CliError::Acceptance(_) => EXIT_ACCEPTANCE,
            CliError::Core(e) => match e {
                E::NonFiniteLogits | E::NonFinite(_) | E::GradientBlowUp(_) | E::ZeroNorm | E::DegeneratePartition => {
                    EXIT_NUMERICAL
                }
                _ => EXIT_CONFIG,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Acceptance(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<cliptta::Error> for CliError {
    fn from(e: cliptta::Error) -> Self {
        CliError::Core(e)
    }
}
