use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the codec.
///
/// Variants are grouped by the process exit code the CLI maps them to; see
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("quantization ladder error: level {level} out of range for {n_levels} levels")]
    Ladder { level: usize, n_levels: usize },

    #[error("table precision error: {0}")]
    Precision(String),

    #[error("symbol {symbol} outside coder range [{min}, {max}] (channel {channel})")]
    CoderDomain {
        channel: usize,
        symbol: i32,
        min: i32,
        max: i32,
    },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("truncated data: {0}")]
    Truncated(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
        /// Parameters after the last epoch that finished with a finite loss.
        checkpoint: Option<Box<crate::transform::Checkpoint>>,
    },

    #[error("insufficient capacity: coarsest level needs {needed_bits:.1} bits, budget is {budget_bits:.1}")]
    InsufficientCapacity { needed_bits: f64, budget_bits: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code: 2 configuration, 3 data/format, 4 capacity.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Ladder { .. } | Error::Precision(_) => 2,
            Error::InsufficientCapacity { .. } => 4,
            Error::Dimension(_)
            | Error::Numeric(_)
            | Error::CoderDomain { .. }
            | Error::Checksum { .. }
            | Error::Truncated(_)
            | Error::Format(_)
            | Error::Divergence { .. }
            | Error::Io(_) => 3,
        }
    }
}
