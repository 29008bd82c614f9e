use std::path::PathBuf;

use nowcast_core::Error as CoreError;

/// Process exit codes. Stable contract: success is 0, a failed self-check
/// is 1, malformed data is 2, and a configuration problem is 3.
pub const EXIT_OK: i32 = 0;
pub const EXIT_SELF_CHECK: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum ToolError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic at byte 0, expected \"{expected}\"")]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("{path}: unsupported version {got} at byte 4, expected {expected}")]
    BadVersion {
        path: PathBuf,
        got: u32,
        expected: u32,
    },
    #[error("{path}: truncated at byte {offset}, needed {needed} more bytes")]
    Truncated {
        path: PathBuf,
        offset: u64,
        needed: u64,
    },
    /// Structurally well-formed bytes carrying an illegal value; the
    /// offset points at the offending field.
    #[error("{path}: {detail} at byte {offset}")]
    Malformed {
        path: PathBuf,
        offset: u64,
        detail: String,
    },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Core(#[from] CoreError),
}

impl ToolError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ToolError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            ToolError::Config(_) | ToolError::Core(CoreError::InvalidConfig(_)) => EXIT_CONFIG,
            _ => EXIT_DATA,
        }
    }
}

pub type Result<T> = std::result::Result<T, ToolError>;
