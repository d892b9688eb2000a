use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::topology::TopologyError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: parse error at line {line}, column {column}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{}invalid topology: {source}", path_prefix(.path))]
    Topology {
        path: Option<PathBuf>,
        #[source]
        source: TopologyError,
    },

    #[error("{}: override targets unknown service {service}", path.display())]
    UnknownOverride { path: PathBuf, service: String },

    #[error("{}: row {row}: {message}", path.display())]
    Trace {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("unknown service {0}")]
    UnknownService(String),

    #[error(transparent)]
    Metric(#[from] crate::telemetry::MetricError),

    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    #[error("{0}")]
    Evaluation(String),

    #[error("{}: missing artifact", .0.display())]
    MissingArtifact(PathBuf),

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

fn path_prefix(p: &Option<PathBuf>) -> String {
    match p {
        Some(p) => format!("{}: ", p.display()),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingArtifact(path.to_path_buf());
        }
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn parse(path: &Path, e: serde_json::Error) -> Self {
        Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}
