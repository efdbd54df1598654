use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("embedding row {row} has zero norm")]
    ZeroEmbedding { row: usize },

    #[error("no interactions on non-cold items")]
    NoInteractions,

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("stopping probability must lie in (0, 1), got {0}")]
    InvalidPrior(f64),

    #[error("non-finite value at step {step}")]
    NumericalOverflow { step: usize },

    #[error("enumeration over {size} trajectories exceeds the limit of {limit}")]
    EnumerationTooLarge { size: u128, limit: u128 },

    #[error("evaluation slice is empty")]
    EmptySlice,

    #[error("rank correlation undefined: all values tied")]
    DegenerateRanks,

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Stable machine-readable identifier for the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io(_) => "Io",
            Error::BadMagic { .. } => "BadMagic",
            Error::Truncated(_) => "Truncated",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::ZeroEmbedding { .. } => "ZeroEmbedding",
            Error::NoInteractions => "NoInteractions",
            Error::InvalidTemperature(_) => "InvalidTemperature",
            Error::InvalidPrior(_) => "InvalidPrior",
            Error::NumericalOverflow { .. } => "NumericalOverflow",
            Error::EnumerationTooLarge { .. } => "EnumerationTooLarge",
            Error::EmptySlice => "EmptySlice",
            Error::DegenerateRanks => "DegenerateRanks",
            Error::CorruptCheckpoint(_) => "CorruptCheckpoint",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::Config(_) => "Config",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
