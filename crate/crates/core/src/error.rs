//! Error type shared by every stage of the separation pipeline.

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an input was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An unknown source-family id was requested.
    #[error("unknown source kind `{0}`")]
    UnknownSourceKind(String),

    /// A sample fell outside the declared mixing domain box.
    #[error("sample {index} channel {channel} value {value} outside mixing domain [{lo}, {hi}]")]
    DomainViolation {
        index: usize,
        channel: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    /// A radicand of the mixing map was not strictly positive.
    #[error("non-positive radicand {value} in mixing component {component} at sample {index}")]
    NonPositiveRadicand {
        component: usize,
        index: usize,
        value: f64,
    },

    /// Sample covariance (or a local second-moment matrix) is not positive definite.
    #[error("matrix not positive definite: smallest eigenvalue {smallest}")]
    NotPositiveDefinite { smallest: f64 },

    /// A matrix expected to be symmetric was not.
    #[error("matrix not symmetric (max asymmetry {max_asymmetry})")]
    NotSymmetric { max_asymmetry: f64 },

    /// Shapes of two operands do not agree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A query point fell outside the grid bounds.
    #[error("point out of grid bounds in dimension {dim}: {value} not in [{lo}, {hi}]")]
    OutOfBounds { dim: usize, value: f64, lo: f64, hi: f64 },

    /// No bin satisfied the validity requirements.
    #[error("no valid bins: {0}")]
    NoValidBins(String),

    /// Every bin of an interpolation stencil was masked.
    #[error("no valid bin within interpolation stencil at {0:?}")]
    NoValidStencil(Vec<f64>),

    /// A component had zero variance where variation is required.
    #[error("degenerate component {component}: zero variance")]
    DegenerateComponent { component: usize },

    /// An operation is outside the supported problem size.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A persisted artifact is missing.
    #[error("missing artifact `{0}`")]
    MissingArtifact(String),

    /// A persisted artifact has an incompatible schema version.
    #[error("artifact `{path}` has schema `{found}`, expected `{expected}`")]
    SchemaMismatch {
        path: String,
        found: String,
        expected: String,
    },

    /// A file could not be parsed.
    #[error("malformed file `{path}`: {reason}")]
    MalformedFile { path: String, reason: String },

    /// Configuration file error.
    #[error("config error: {0}")]
    Config(String),

    /// A pipeline stage failed.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
