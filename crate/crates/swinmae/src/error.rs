use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest parse error at {path}:{line}: {msg}")]
    ManifestParse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("duplicate id {0:?} in manifest")]
    DuplicateId(String),

    #[error("mask path {path} for entry {id:?} does not exist")]
    DanglingMask { id: String, path: PathBuf },

    #[error("cannot decode image {path}: {msg}")]
    ImageDecode { path: PathBuf, msg: String },

    #[error("mask dimensions {mask:?} do not match image dimensions {image:?} for {id:?}")]
    MaskDimensionMismatch {
        id: String,
        mask: (usize, usize),
        image: (usize, usize),
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("shape mismatch for tensor {name}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("fold {fold} failed: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for data problems, 3 for numerical
    /// failures, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 3,
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::Fold { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
