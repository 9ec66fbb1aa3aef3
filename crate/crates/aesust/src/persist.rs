//! Checkpoint files: one archive per file, written atomically.

use std::path::{Path, PathBuf};

use aesust_core::archive::{load_archive, save_archive, ArchiveEntry, ArchiveError};
use aesust_core::AesUst;

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: ArchiveError,
    },
    #[error("{path}: {source}")]
    Model {
        path: PathBuf,
        #[source]
        source: aesust_core::Error,
    },
}

/// Writes to a sibling temporary file and renames it over `path`, so readers
/// never see a partial archive.
pub fn write_archive(path: &Path, entries: &[ArchiveEntry]) -> Result<(), PersistError> {
    let bytes = save_archive(entries).map_err(|source| PersistError::Format {
        path: path.to_path_buf(),
        source,
    })?;
    let io = |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, &bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn read_archive(path: &Path) -> Result<Vec<ArchiveEntry>, PersistError> {
    let bytes = std::fs::read(path).map_err(|source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    load_archive(&bytes).map_err(|source| PersistError::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a checkpoint; returns the model and the step it was saved at.
pub fn load_model(path: &Path) -> Result<(AesUst<f32>, u64), PersistError> {
    let entries = read_archive(path)?;
    AesUst::from_entries(&entries).map_err(|source| PersistError::Model {
        path: path.to_path_buf(),
        source,
    })
}
