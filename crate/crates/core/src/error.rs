use thiserror::Error;

use crate::model::Violation;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {}", join_violations(.0))]
    Invalid(Vec<Violation>),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{registers} registers exceed the dense enumeration bound of {max}")]
    Capacity { registers: usize, max: usize },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("model has {df} degrees of freedom; refusing to fit without force")]
    NegativeDf { df: i64 },

    #[error("no observed units")]
    EmptyCounts,

    #[error("iterative proportional fitting did not converge in {iterations} iterations (max margin error {error:e})")]
    IpfNonConvergence { iterations: usize, error: f64 },

    #[error("every start failed; last error: {0}")]
    AllStartsFailed(String),

    #[error("class {class} has miss probability {miss_prob} within 1e-9 of one; its size is unbounded")]
    UnboundedEstimate { class: usize, miss_prob: f64 },

    #[error("parameters on the boundary of the parameter space: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that stem from the numerics rather than from the input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::IpfNonConvergence { .. }
                | Error::AllStartsFailed(_)
                | Error::UnboundedEstimate { .. }
                | Error::Degenerate(_)
        )
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;
