use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed record in {source_name} at entry {index}: {reason}")]
    MalformedRecord {
        source_name: String,
        index: usize,
        reason: String,
    },

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("duplicate image id {0:?}")]
    DuplicateImageId(String),

    #[error("invalid label space: {0}")]
    InvalidLabelSpace(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate box: {width}x{height} pixels")]
    DegenerateBox { width: i64, height: i64 },

    #[error("crop {0:?} has no pixels")]
    NoPixels(String),

    #[error("unknown embedding provider {0:?}")]
    UnknownProvider(String),

    #[error("missing embedding for crop {0:?}")]
    MissingEmbedding(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("corrupt embedding store: {0}")]
    CorruptStore(String),

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("score vector is not normalized (sum {sum})")]
    UnnormalizedScore { sum: f64 },

    #[error("confusion matrix is empty")]
    EmptyMatrix,

    #[error("invalid split fractions {0:?}")]
    InvalidFractions(Vec<f64>),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("need at least 2 stations, found {0}")]
    TooFewStations(usize),

    #[error("grid point ({embedder}, alpha {alpha}) has no non-empty training crops")]
    DegenerateGridPoint { embedder: String, alpha: f64 },

    #[error("every grid point is degenerate")]
    DegenerateGrid,

    #[error("unlabeled pool is empty")]
    EmptyPool,

    #[error("image {0:?} is not in the unlabeled pool")]
    NotQueriedOrUnknown(String),

    #[error("image {image_id:?} already labeled {existing:?}, refusing {proposed:?}")]
    LabelConflict {
        image_id: String,
        existing: String,
        proposed: String,
    },

    #[error("no labeled images")]
    NoLabels,

    #[error("no trained model available")]
    NoModel,

    #[error("missing prediction for image {0:?}")]
    MissingPrediction(String),

    #[error("project state version {found} is not supported (expected major {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt project state: {0}")]
    CorruptState(String),

    #[error("project is locked by {}", .0.display())]
    ProjectLocked(PathBuf),

    #[error("i/o failure on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode failure on {}: {source}", .path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path.into());
        }
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(
        source_name: impl Into<String>,
        index: usize,
        reason: impl Into<String>,
    ) -> Self {
        Error::MalformedRecord {
            source_name: source_name.into(),
            index,
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input (files, labels, flags) rather
    /// than runtime failures.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. }
                | Error::Image { .. }
                | Error::NonFiniteLoss { .. }
                | Error::ProjectLocked(_)
        )
    }
}
