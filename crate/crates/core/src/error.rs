use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geobox: {0}")]
    InvalidGeoBox(String),
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("no spatial overlap between source and target grids")]
    NoOverlap,
    #[error("grid mismatch: source pixel size {source_px:?} vs target {target_px:?}")]
    GridMismatch {
        source_px: (f64, f64),
        target_px: (f64, f64),
    },
    #[error("band `{band}` missing from {satellite} raster")]
    MissingBand { satellite: String, band: String },
    #[error("unknown satellite `{0}`")]
    UnknownSatellite(String),
    #[error("malformed TSRF file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("invalid stack spec: {0}")]
    InvalidSpec(String),
    #[error("normalization stats missing or incomplete ({have} of {need} channels)")]
    MissingStats { have: usize, need: usize },
    #[error("dihedral augmentation needs a square tile, got {height}x{width}")]
    NonSquareTile { height: usize, width: usize },

    #[error("spatial k-fold needs K >= 2, got {0}")]
    InvalidFoldCount(usize),
    #[error("all tiles fall in a single grid cell; cannot form {0} folds")]
    DegenerateExtent(usize),
    #[error("tile {id} is dated {year}, after validation year {validation_year}")]
    FutureTile {
        id: String,
        year: i32,
        validation_year: i32,
    },
    #[error("invalid split parameters: {0}")]
    InvalidSplit(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spatial dims {height}x{width} not divisible by 2^{depth}")]
    IndivisibleSpatialDims {
        height: usize,
        width: usize,
        depth: usize,
    },
    #[error("every pixel is ignored; loss is undefined")]
    EmptyLoss,
    #[error("invalid model config: {0}")]
    InvalidModelConfig(String),
    #[error("checkpoint expects {expected} input channels, tiles have {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("label value {0} outside {{0, 1}}")]
    InvalidLabel(f64),
    #[error("ROC-AUC needs both classes, got {positives} positives and {negatives} negatives")]
    DegenerateLabels { positives: usize, negatives: usize },
    #[error("probability {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("blend needs at least one probability map")]
    EmptyEnsemble,

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by malformed or inconsistent inputs rather than
    /// by the environment (I/O) or a numerical failure during a run.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Io { source, .. } => matches!(
                source.kind(),
                std::io::ErrorKind::NotFound | std::io::ErrorKind::InvalidData
            ),
            Error::NonFiniteLoss { .. } => false,
            _ => true,
        }
    }
}
