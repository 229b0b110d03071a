use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    /// Malformed or corrupt on-disk artifact (clip, checkpoint, manifest).
    #[error("format error: {0}")]
    Format(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// Process exit code for the command-line tool: 2 config/usage, 3 I/O,
    /// 4 corrupt artifact, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension(_) | Error::Index(_) | Error::Data(_) => 2,
            Error::Io { .. } => 3,
            Error::Format(_) => 4,
            Error::Numeric(_) | Error::Contract(_) => 1,
        }
    }
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
