//! Crate-wide error type.
//!
//! Every fallible operation returns [`CoreError`] so callers (CLI, tests,
//! harness) can match on the failure class instead of parsing strings. The
//! variants carry enough context to locate the failure: node indices for
//! non-finite simulator states, simulation time for integration failures,
//! epoch/batch indices for training divergence, trajectory ids for data
//! problems.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    /// A resample or interpolation target extends outside the source span.
    #[error("target span [{target_start}, {target_end}] exceeds source span [{source_start}, {source_end}]")]
    SpanMismatch {
        source_start: f64,
        source_end: f64,
        target_start: f64,
        target_end: f64,
    },

    /// A configuration or argument value is outside its valid range.
    #[error("invalid parameter {name}: {reason}")]
    Parameter { name: &'static str, reason: String },

    /// Two arrays that must agree in length or dimension do not.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A state vector picked up a NaN or infinity during simulation.
    #[error("non-finite state at node {node} (t = {time} s)")]
    NonFiniteState { node: usize, time: f64 },

    /// The adaptive integrator could not meet its tolerance.
    #[error("integration failed at t = {time} s: {reason}")]
    Integration { time: f64, reason: String },

    /// The thresholded regression left a rank-deficient active set.
    #[error("singular regression for state equation '{equation}': {reason}")]
    Singularity { equation: String, reason: String },

    /// Thresholding eliminated every library column of some equation.
    #[error("empty model: threshold removed all terms from state equation '{equation}'")]
    EmptyModel { equation: String },

    /// A model trajectory left the admissible region.
    #[error("trajectory diverged at t = {time} s (|x| > {bound})")]
    Divergence { time: f64, bound: f64 },

    /// More subsets were requested than distinct combinations exist.
    #[error("cannot draw {requested} distinct subsets of size {subset_size} from {available} trajectories")]
    Combinatorics {
        requested: usize,
        subset_size: usize,
        available: usize,
    },

    /// An estimator needs more samples than it was given.
    #[error("insufficient data for {context}: need at least {minimum}, got {actual}")]
    InsufficientData {
        context: &'static str,
        minimum: usize,
        actual: usize,
    },

    /// The coefficient covariance could not be factorized.
    #[error("singular coefficient covariance (shrinkage δ = {delta:e}); increase δ or the ensemble size")]
    SingularCovariance { delta: f64 },

    /// Too many Monte-Carlo rollouts diverged for the band to be meaningful.
    #[error("unstable ensemble: {divergent} of {total} sampled rollouts diverged")]
    Instability { divergent: usize, total: usize },

    /// A network was fed NaN or infinity.
    #[error("non-finite input to {context}")]
    NonFiniteInput { context: &'static str },

    /// The training loss became NaN or infinite.
    #[error("training loss diverged at epoch {epoch}, batch {batch}")]
    TrainingDivergence { epoch: usize, batch: usize },

    /// One or more trajectories cannot be used as requested.
    #[error("unusable trajectories ({reason}): ids {ids:?}")]
    Data { reason: String, ids: Vec<usize> },

    /// A referenced artifact is absent from the run manifest.
    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    /// Malformed CSV content (wrong header, bad field count, unparsable number).
    #[error("malformed CSV in {path}: {reason}")]
    Csv { path: String, reason: String },
}

impl CoreError {
    /// Attaches a path to a raw I/O error.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches a path to a JSON (de)serialization error.
    pub fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        CoreError::Json {
            path: path.into(),
            source,
        }
    }
}
