use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite vector")]
    NonFinite,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),

    #[error("empty context")]
    EmptyContext,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-causal append: expected frame {expected}, got {got}")]
    NonCausalAppend { expected: u32, got: u32 },

    #[error("illegal eviction target: slot {slot}, insert_seq {seq}")]
    IllegalEvictionTarget { slot: usize, seq: u64 },

    #[error("no candidates")]
    NoCandidates,

    #[error("no context in slot ({layer}, {head})")]
    NoContext { layer: usize, head: usize },

    #[error("empty queries")]
    EmptyQueries,

    #[error("frame index must be >= 1")]
    FrameIndex,

    #[error("unrecognized trace")]
    UnrecognizedTrace,

    #[error("short read at frame {0}")]
    ShortRead(u32),

    #[error("mismatched stream specs: {0}")]
    SpecMismatch(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Whether this error originates from the filesystem rather than from
    /// bad input or configuration.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::UnrecognizedTrace | Error::ShortRead(_))
    }
}
