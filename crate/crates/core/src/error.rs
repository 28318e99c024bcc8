use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point lies at non-positive camera depth {depth}")]
    NonPositiveDepth { depth: f64 },

    #[error("mesh topology mismatch: {0}")]
    TopologyMismatch(String),

    #[error("k-means produced an empty cluster after {attempts} seeding attempts")]
    EmptyCluster { attempts: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("cluster probabilities are not on the simplex: {0}")]
    SimplexViolation(String),

    #[error("three points are (nearly) collinear; no plane is defined")]
    DegenerateTriple,

    #[error("only {visible} visible keypoints, at least {required} required")]
    TooFewKeypoints { visible: usize, required: usize },

    #[error("image must have non-zero width and height")]
    ZeroSizeImage,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("obj parse error in {path}: {message}")]
    Obj { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
