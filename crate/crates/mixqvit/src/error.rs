use thiserror::Error;

/// Errors surfaced by every subsystem. CLI exit codes map from these variants.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact for stage `{stage}`: {path} (run `mixq {producer}` first)")]
    MissingArtifact {
        stage: String,
        path: String,
        producer: String,
    },

    #[error("stage artifact {path} was produced under a different config (hash {found} != {expected})")]
    ConfigHashMismatch {
        path: String,
        found: String,
        expected: String,
    },

    #[error("allocation infeasible: {constraint} exceeded even at minimum bits (needs {required}, budget {budget})")]
    Infeasible {
        constraint: &'static str,
        required: u64,
        budget: u64,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code contract: 0 ok, 2 config error, 3 missing artifact, 4 infeasible allocation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::ConfigHashMismatch { .. } => 2,
            Error::MissingArtifact { .. } => 3,
            Error::Infeasible { .. } => 4,
            _ => 1,
        }
    }

    /// Stable machine-parsable code emitted on stderr by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "E_SHAPE",
            Error::InvalidShape(_) => "E_SHAPE",
            Error::InvalidArgument(_) => "E_ARG",
            Error::Config(_) => "E_CONFIG",
            Error::MissingArtifact { .. } => "E_MISSING_ARTIFACT",
            Error::ConfigHashMismatch { .. } => "E_CONFIG_HASH",
            Error::Infeasible { .. } => "E_INFEASIBLE",
            Error::Io { .. } => "E_IO",
            Error::Parse { .. } => "E_PARSE",
        }
    }
}
