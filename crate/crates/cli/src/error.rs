use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] hessquant::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stage `{stage}` needs `{}`; run `{producer}` first", path.display())]
    MissingArtifact {
        stage: &'static str,
        producer: &'static str,
        path: PathBuf,
    },

    #[error("{}: {message}", path.display())]
    Artifact { path: PathBuf, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 I/O, 2 configuration or missing/malformed input,
    /// 3 infeasible plan, 4 numerical failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Config(_) | CliError::MissingArtifact { .. } | CliError::Artifact { .. } => 2,
            CliError::Core(e) => core_exit_code(e),
        }
    }
}

fn core_exit_code(e: &hessquant::Error) -> u8 {
    use hessquant::Error as E;
    match e {
        E::Io { .. } => 1,
        E::Infeasible { .. } => 3,
        E::NonFinite { .. } | E::NotConverged { .. } | E::EigenNotConverged { .. } => 4,
        E::Oracle { source, .. } => core_exit_code(source),
        _ => 2,
    }
}
