use std::path::PathBuf;

/// Errors produced by the processing stages.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },
    #[error("no depth support")]
    NoDepthSupport,
    #[error("ground not found: only {0} points inside the height gate")]
    GroundNotFound(usize),
    #[error("horizon undefined: ground plane is parallel to the image plane")]
    HorizonUndefined,
    #[error("no samples to fit")]
    NoSamples,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate patch box {0}x{1}")]
    DegeneratePatch(usize, usize),
    #[error("insufficient crops for filter pretraining: need {need}, got {got}")]
    InsufficientCrops { need: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty class set")]
    EmptyClassSet,
    #[error("negative capacity on edge {0}")]
    NegativeCapacity(usize),
    #[error("model format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Other(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
