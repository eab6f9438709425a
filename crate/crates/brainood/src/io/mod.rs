//! File formats: dataset manifests with CSV matrices, split plans,
//! versioned binary checkpoints, and JSON results.
//!
//! Every writer goes through [`write_atomic`]: content lands in a temp file
//! in the destination directory, then renames into place, so a crash never
//! leaves a half-written artifact under the final name.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

pub mod checkpoint;
pub mod manifest;
pub mod results;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
    #[error("subject '{subject}' ({path}): {detail}")]
    Matrix {
        subject: String,
        path: String,
        detail: String,
    },
    #[error(transparent)]
    Data(#[from] brainood_core::braindata::DataError),
}

pub(crate) fn file_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::File {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn format_err(path: &Path, detail: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Write `bytes` to `path` via a temp file and rename. Creates parent
/// directories as needed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| file_err(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp_path = Path::new(&tmp);
    let mut f = fs::File::create(tmp_path).map_err(|e| file_err(tmp_path, e))?;
    f.write_all(bytes).map_err(|e| file_err(tmp_path, e))?;
    f.sync_all().map_err(|e| file_err(tmp_path, e))?;
    drop(f);
    fs::rename(tmp_path, path).map_err(|e| file_err(path, e))?;
    Ok(())
}

/// Serialize as pretty JSON (stable key order: struct declaration order)
/// with a trailing newline, and write atomically.
pub fn save_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| format_err(path, e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let bytes = fs::read(path).map_err(|e| file_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| format_err(path, e.to_string()))
}
