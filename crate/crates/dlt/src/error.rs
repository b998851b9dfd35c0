use thiserror::Error;

/// Error type shared by all modules of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry mismatch at layer {layer}: {reason}")]
    GeometryMismatch { layer: usize, reason: String },

    #[error("extent mismatch: expected {expected:?}, got {got:?}")]
    ExtentMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite score at flat index {0}")]
    NonFiniteScore(usize),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("scores diverged to non-finite at epoch {epoch}, batch {batch}")]
    DivergedToNonFinite { epoch: usize, batch: usize },

    #[error("posterior has zero mass at layer {layer}, position {position}")]
    AllZeroPosterior { layer: usize, position: usize },

    #[error("invalid layer or state: {0}")]
    InvalidLayerOrState(String),

    #[error("instance too large for brute-force reference: {0}")]
    InstanceTooLarge(String),

    #[error("bad idx magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated file: needed {needed} more bytes at offset {offset}")]
    TruncatedFile { offset: usize, needed: usize },

    #[error("unsupported quantization levels {0}: must be a power of two in 2..=256")]
    UnsupportedLevels(usize),

    #[error("image {height}x{width} too small for a {patch_h}x{patch_w} patch")]
    ImageTooSmall {
        height: usize,
        width: usize,
        patch_h: usize,
        patch_w: usize,
    },

    #[error("malformed pgm header: {0}")]
    MalformedHeader(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for data/format problems, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteScore(_)
            | Error::DivergedToNonFinite { .. }
            | Error::AllZeroPosterior { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
