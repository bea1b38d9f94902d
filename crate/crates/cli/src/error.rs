use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: videosaur::Error,
    },
    #[error(transparent)]
    Core(#[from] videosaur::Error),
    #[error("interrupted; checkpoint saved to {0}")]
    Interrupted(PathBuf),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Attaches the offending file to a core error.
    pub fn file(path: &Path) -> impl FnOnce(videosaur::Error) -> Self + '_ {
        move |source| Self::File {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use videosaur::Error as E;
        let core = |e: &E| match e {
            E::NumericalAbort { .. } => 3,
            E::Io(_)
            | E::BadMagic { .. }
            | E::UnsupportedVersion(_)
            | E::Truncated { .. }
            | E::NonFinite { .. } => 2,
            _ => 1,
        };
        match self {
            Self::Config(_) => 1,
            Self::Io { .. } => 2,
            Self::File { source, .. } => core(source),
            Self::Core(e) => core(e),
            Self::Interrupted(_) => 130,
        }
    }
}
