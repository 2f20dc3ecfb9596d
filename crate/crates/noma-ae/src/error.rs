//! Crate-wide error type and result alias.

use crate::quantizer::QuantizerCodebook;

/// Errors surfaced by the library. The CLI maps these onto exit codes:
/// configuration problems → 2, training divergence → 3, failed curve
/// comparisons → 4, anything else → 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed or inconsistent experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    /// An iterative numerical routine failed to reach its tolerance.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Lloyd–Max design did not converge; carries the last iterate so the
    /// caller can inspect how far it got.
    #[error("quantizer design did not converge after {iters} iterations (last MSQE {last_msqe:.6e})")]
    QuantizerNonConvergence {
        iters: usize,
        last_msqe: f64,
        last: Box<QuantizerCodebook>,
    },

    /// Checkpoint file is malformed or from an unknown format version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Curve comparison failed structurally (grid mismatch, bad CSV).
    #[error("comparison error: {0}")]
    Comparison(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
