//! Shared error type for the toolkit.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input too short: {len} samples, need at least {min}")]
    InputTooShort { len: usize, min: usize },
    #[error("bad stft config: {0}")]
    BadStftConfig(String),
    #[error("unsupported overlap: overlap-add normalization vanishes with this window/hop")]
    UnsupportedOverlap,
    #[error("rate mismatch: {a} Hz vs {b} Hz")]
    RateMismatch { a: u32, b: u32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("room too small for source placement margins")]
    RoomTooSmall,
    #[error("insufficient decay: impulse response tail covers less than the required decay range")]
    InsufficientDecay,
    #[error("not a checkpoint: bad magic bytes")]
    NotACheckpoint,
    #[error("truncated checkpoint")]
    TruncatedCheckpoint,
    #[error("missing gradients for parameter {0}")]
    MissingGradients(String),
    #[error("diverged at step {step}: non-finite loss{}", last_checkpoint.as_ref().map(|p| format!(", last checkpoint {}", p.display())).unwrap_or_default())]
    Diverged {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("undefined SRMR: input is silent")]
    UndefinedSrmr,
    #[error("zero reference signal")]
    ZeroReference,
    #[error("model expects {expected} frequency bins, input has {got}")]
    BinMismatch { expected: usize, got: usize },
    #[error("empty manifest")]
    EmptyManifest,
    #[error("unsupported wav: {0}")]
    UnsupportedWav(String),
    #[error("malformed config: {0}")]
    BadConfig(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
