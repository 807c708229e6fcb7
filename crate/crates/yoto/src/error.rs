use std::io;
use std::path::{Path, PathBuf};

use yoto_core::Error as CoreError;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const PROTOCOL: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    /// Malformed input file: bad JSON, unknown key, wrong magic, truncation.
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    /// Schema violation in a configuration file.
    #[error("{}: {msg}", path.display())]
    Config { path: PathBuf, msg: String },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    pub fn config(path: &Path, msg: impl Into<String>) -> Self {
        CliError::Config {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::Shape { .. } => exit::CONFIG,
                CoreError::Data(_) => exit::IO,
                CoreError::Protocol(_) => exit::PROTOCOL,
                CoreError::Contract(_) | CoreError::EmptySequence(_) => exit::INTERNAL,
            },
            CliError::Io { .. } | CliError::Format { .. } => exit::IO,
            CliError::Config { .. } | CliError::Usage(_) => exit::CONFIG,
        }
    }
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

pub(crate) fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
