//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Reduced admittance matrix is singular; the feeder cannot support a
    /// no-load voltage profile.
    #[error("degenerate network: {0}")]
    DegenerateNetwork(String),

    #[error("topology error: {0}")]
    Topology(String),

    #[error("power flow diverged after {iterations} iterations (last residual {residual:.3e})")]
    PowerFlowDiverged { iterations: usize, residual: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty mask")]
    EmptyMask,

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("zero input: {0}")]
    ZeroInput(String),

    #[error("non-finite objective at outer iteration {iteration}")]
    NonFiniteObjective { iteration: usize, trace: Vec<f64> },

    #[error("inner solve diverged at outer iteration {iteration}")]
    InnerSolveDiverged { iteration: usize, trace: Vec<f64> },

    #[error("degenerate truth: no entries above denominator floor {0:.3e}")]
    DegenerateTruth(f64),

    #[error("schema error in {path}: {detail}")]
    Schema { path: String, detail: String },

    /// Failure inside a multi-stage run, annotated with where it happened
    /// (sensor index, time step).
    #[error("{context}: {source}")]
    Stage {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn schema(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn in_stage(self, context: impl Into<String>) -> Self {
        Error::Stage {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
