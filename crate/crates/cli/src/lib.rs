//! Batch front end for the sparse LPV design pipeline.
//!
//! Every command reads a [`RunConfig`], writes its artifacts into the
//! output directory and maps the outcome onto a stable exit code:
//! 0 success, 1 usage or configuration error, 2 infeasible design or failed
//! certificate, 3 numerical failure.

pub mod commands;
pub mod config;
pub mod sweep;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub use config::{ModelKind, Overrides, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn infeasible(message: impl Into<String>) -> Self {
        Self { code: EXIT_INFEASIBLE, message: message.into() }
    }

    pub fn code(&self) -> i32 {
        self.code
    }
}

impl From<sparse_lpv::Error> for CliError {
    fn from(e: sparse_lpv::Error) -> Self {
        let code = if e.is_infeasible() {
            EXIT_INFEASIBLE
        } else if e.is_numerical() {
            EXIT_NUMERICAL
        } else {
            EXIT_USAGE
        };
        Self { code, message: e.to_string() }
    }
}

/// What a command produced and whether its check passed.
#[derive(Debug)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// Failed check, with outputs still written.
    pub failure: Option<CliError>,
}

impl Outcome {
    pub fn code(&self) -> i32 {
        self.failure.as_ref().map_or(EXIT_OK, CliError::code)
    }
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let io_err = |e: std::io::Error| CliError::usage(format!("cannot write {}: {e}", path.display()));
    fs::create_dir_all(dir).map_err(io_err)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(contents).map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::usage(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("invalid {}: {e}", path.display())))
}
