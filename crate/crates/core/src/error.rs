use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: Vec<u8> },

    #[error("malformed header: {0}")]
    HeaderParse(String),

    #[error("payload size mismatch: header implies {expected} bytes, found {actual}")]
    PayloadSizeMismatch { expected: u64, actual: u64 },

    #[error("invalid payload: {0}")]
    PayloadInvalid(String),

    #[error("could not decode {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("could not encode {path}: {message}")]
    Encode { path: PathBuf, message: String },

    #[error("class {class:?} used by image {image_id:?} is not in the class list")]
    UnknownClassName { class: String, image_id: String },

    #[error("duplicate class name {0:?}")]
    DuplicateClassName(String),

    #[error("duplicate image id {0:?}")]
    DuplicateImageId(String),

    #[error("path does not exist: {0}")]
    MissingPath(PathBuf),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("label id {0} is neither in the legend nor the ignore id")]
    UnknownLabelId(u16),

    #[error("image {width}x{height} is smaller than patch size {patch_size}")]
    ImageTooSmall {
        width: u32,
        height: u32,
        patch_size: u32,
    },

    #[error("feature backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("unknown backend id {0:?} (expected \"file\" or \"mock:<seed>\")")]
    UnknownBackend(String),

    #[error("source mask has no foreground pixels in the token-covered region")]
    EmptySourceMask,

    #[error("token mask selects no tokens")]
    EmptyTokenMask,

    #[error("masked mean embedding has zero norm")]
    ZeroVector,

    #[error("no usable instances for class {0:?}")]
    NoInstancesForClass(String),

    #[error("invalid prototype bank: {0}")]
    InvalidBank(String),

    #[error("dimension mismatch: expected {expected}, found {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: expected {expected:?}, found {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("threshold {0} outside [0, 1]")]
    ThresholdOutOfRange(f64),

    #[error("proposal mask is empty")]
    EmptyProposalMask,

    #[error("score {0} outside [0, 1]")]
    InvalidScore(f64),

    #[error("ground truth has no positive pixels")]
    EmptyGroundTruth,

    #[error("missing inference output: {0}")]
    MissingInference(PathBuf),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("image {image_id}: {source}")]
    Image {
        image_id: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_image(self, image_id: &str) -> Self {
        match self {
            err @ Error::Image { .. } => err,
            other => Error::Image {
                image_id: image_id.to_owned(),
                source: Box::new(other),
            },
        }
    }

    /// Strips any image context wrapper.
    pub fn root(&self) -> &Error {
        match self {
            Error::Image { source, .. } => source.root(),
            other => other,
        }
    }
}
