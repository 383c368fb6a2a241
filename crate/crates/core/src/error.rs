//! Crate error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlomError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("solver failed to converge at time index {time_index}: {detail}")]
    SolverNonConvergence { time_index: usize, detail: String },

    #[error("non-finite state encountered at {context}")]
    NonFinite { context: String },

    #[error("sample {sample} failed: {source}")]
    SampleFailed {
        sample: usize,
        #[source]
        source: Box<PlomError>,
    },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("requested tolerance unreachable: {0}")]
    ToleranceUnreachable(String),

    #[error("eigenvalue diagnostics: {0}")]
    Diagnostics(String),

    #[error("hessian block not positive definite at iteration {iteration} (min eigenvalue {min_eig:.3e})")]
    IndefiniteHessian { iteration: usize, min_eig: f64 },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<PlomError>,
    },

    #[error("artifact integrity: {0}")]
    Integrity(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest error: {0}")]
    Manifest(String),
}

impl PlomError {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        PlomError::Io {
            path: path.into(),
            source,
        }
    }

    /// Wrap an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &str) -> Self {
        PlomError::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
