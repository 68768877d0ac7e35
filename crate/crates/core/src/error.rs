use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("ground-truth database is empty")]
    EmptyDatabase,
    #[error("cloud has {got} points, detector needs at least {need}")]
    InsufficientPoints { got: usize, need: usize },
    #[error("sampling trace does not match input: {0}")]
    TraceMismatch(String),
    #[error("backward requires a train-mode forward cache")]
    InvalidCache,
    #[error("state is frozen and cannot be updated")]
    FrozenState,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty proposal set")]
    EmptyProposals,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("proposal alignment mismatch: student {student}, teacher {teacher}")]
    Alignment { student: usize, teacher: usize },
    #[error("malformed batch: {0}")]
    Batch(String),
    #[error("empty training corpus for {0}")]
    EmptyCorpus(String),
    #[error("unknown class id {0}")]
    UnknownClass(u32),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptFile {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Tag an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Stage name for stage-tagged errors.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

/// Extension for attaching stage tags to results.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
