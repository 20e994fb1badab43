//! Command-line front end: dataset generation, training, evaluation, the
//! forgetting-fraction sweep, ablations and analysis export.

mod args;
mod commands;
mod config;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;

pub use args::{Cli, Command};
pub use manifest::{RunManifest, MANIFEST_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_MALFORMED: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("missing artifact: {}", .0.display())]
    Missing(PathBuf),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error(transparent)]
    Core(navmem::error::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Missing(_) => EXIT_MISSING,
            CliError::Malformed(_) => EXIT_MALFORMED,
            CliError::Core(_) => EXIT_FAILURE,
        }
    }
}

impl From<navmem::error::Error> for CliError {
    fn from(e: navmem::error::Error) -> Self {
        use navmem::error::Error;
        match e {
            Error::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => CliError::Missing(path),
            Error::Format { what, detail } => CliError::Malformed(format!("{what}: {detail}")),
            Error::Json(e) => CliError::Malformed(e.to_string()),
            Error::Validation(m) => CliError::Usage(m),
            other => CliError::Core(other),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` (program name first), merges any `--config` file and runs
/// the command. Returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match config::merge_config_file(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
