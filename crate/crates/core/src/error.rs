//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Invalid argument or configuration value.
    Param(String),
    /// Operand shapes incompatible for the named op.
    Shape {
        op: &'static str,
        detail: String,
    },
    /// A forward op produced a non-finite value from finite inputs.
    NonFinite { op: &'static str },
    /// Fixed layer norm applied to a (near-)constant row: the z-score is
    /// undefined.
    DegenerateLayerNorm,
    /// Training aborted on a non-finite loss.
    NonFiniteLoss { step: usize, episode_seed: u64 },
    /// Text-format parse failure. `offset` is the byte offset of the
    /// offending line start.
    Parse {
        offset: usize,
        line: usize,
        msg: String,
    },
    /// Checkpoint file rejected.
    Checkpoint(String),
    /// Checkpoint written by an incompatible format version.
    CheckpointVersion { found: u32, expected: u32 },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Param(msg) => write!(f, "invalid parameter: {msg}"),
            Error::Shape { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            Error::DegenerateLayerNorm => {
                write!(f, "fixed layer norm of a constant row (degenerate z-score)")
            }
            Error::NonFiniteLoss { step, episode_seed } => write!(
                f,
                "non-finite loss at gradient step {step} (episode seed {episode_seed})"
            ),
            Error::Parse { offset, line, msg } => {
                write!(f, "parse error at line {line} (byte offset {offset}): {msg}")
            }
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::CheckpointVersion { found, expected } => {
                write!(f, "checkpoint version {found}, expected {expected}")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
