use std::fmt;
use std::path::PathBuf;

/// Errors shared across the pipeline modules.
#[derive(Debug)]
pub enum Error {
    /// File violates its on-disk layout (bad size, bad magic, empty payload).
    MalformedFile { path: PathBuf, detail: String },
    /// Payload decoded but carries invalid values (NaN/Inf coordinates).
    InvalidData { path: PathBuf, detail: String },
    /// Raw label id missing from the remap table.
    UnknownLabel { path: PathBuf, offset: usize, raw: u32 },
    /// Text line does not match the expected grammar.
    MalformedLine { path: PathBuf, line: usize, detail: String },
    /// Rotation fails the orthonormality / determinant checks.
    InvalidPose { detail: String },
    /// Search or fusion target frame has no points.
    EmptyTarget,
    /// Matrix/array dimensions disagree.
    ShapeError { detail: String },
    /// Sequence or dataset has no usable elements.
    EmptyInput,
    /// Configuration value out of range or self-contradictory.
    InvalidConfig { detail: String },
    /// Every point in the batch is masked out.
    DegenerateBatch,
    /// Model file has the wrong magic, version, or is truncated.
    IncompatibleModel { detail: String },
    /// Required input path does not exist.
    NotFound { path: PathBuf },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::MalformedFile { path, detail } => {
                write!(f, "malformed file {}: {}", path.display(), detail)
            }
            Error::InvalidData { path, detail } => {
                write!(f, "invalid data in {}: {}", path.display(), detail)
            }
            Error::UnknownLabel { path, offset, raw } => write!(
                f,
                "unknown label {raw:#x} at point {offset} in {}",
                path.display()
            ),
            Error::MalformedLine { path, line, detail } => {
                write!(f, "{}:{}: {}", path.display(), line, detail)
            }
            Error::InvalidPose { detail } => write!(f, "invalid pose: {detail}"),
            Error::EmptyTarget => write!(f, "target frame has no points"),
            Error::ShapeError { detail } => write!(f, "shape mismatch: {detail}"),
            Error::EmptyInput => write!(f, "input is empty"),
            Error::InvalidConfig { detail } => write!(f, "invalid config: {detail}"),
            Error::DegenerateBatch => write!(f, "all points in batch are ignored"),
            Error::IncompatibleModel { detail } => write!(f, "incompatible model: {detail}"),
            Error::NotFound { path } => write!(f, "not found: {}", path.display()),
            Error::Io(e) => write!(f, "i/o error: {e}"),
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

pub type Result<T> = std::result::Result<T, Error>;
