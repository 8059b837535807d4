//! On-disk formats: netpbm images, datasets, checkpoints, run
//! configuration and reports.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod netpbm;
pub mod report;

use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {error}")]
    Fs { path: PathBuf, error: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}:{line}: {msg}")]
    Line { path: PathBuf, line: usize, msg: String },
    #[error("{0} exists and is not empty (pass --force to overwrite)")]
    NotEmpty(PathBuf),
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;

pub(crate) fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |error| IoError::Fs {
        path: path.to_path_buf(),
        error,
    }
}

pub(crate) fn format_err(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(fs_err(path))
}

/// Writes `bytes`, creating missing parent directories.
pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(fs_err(parent))?;
    }
    std::fs::write(path, bytes).map_err(fs_err(path))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read(path)?).map_err(|e| format_err(path, e.to_string()))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e.to_string()))?;
    text.push('\n');
    write(path, text.as_bytes())
}

/// Creates `dir` if needed. An existing non-empty directory is refused
/// unless `force` is set.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(fs_err(dir))?;
        if entries.next().is_some() && !force {
            return Err(IoError::NotEmpty(dir.to_path_buf()));
        }
    }
    std::fs::create_dir_all(dir).map_err(fs_err(dir))
}
