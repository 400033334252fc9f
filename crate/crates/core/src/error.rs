use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate geometry: projection denominator {denominator:.3} mm is below the {floor} mm floor")]
    DegenerateGeometry { denominator: f64, floor: f64 },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what} {path}: {message}")]
    Parse {
        what: &'static str,
        path: PathBuf,
        message: String,
    },

    #[error("empty scan")]
    EmptyScan,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid scan: {0}")]
    InvalidScan(String),

    #[error("invalid marker plan: {0}")]
    InvalidPlan(String),

    #[error("breath-hold {0} has no frames")]
    EmptyBreathHold(String),

    #[error("no marker evidence: probability volume is empty")]
    EmptyVolume,

    #[error("marker not found in volume: {found} clusters for {expected} markers")]
    MarkerNotFound { found: usize, expected: usize },

    #[error("too many markers for exhaustive matching: {0} (at most {max})", max = crate::volume::MAX_EXHAUSTIVE_MARKERS)]
    TooManyMarkers(usize),

    #[error("rank-deficient lateral fit: {0}")]
    RankDeficient(String),

    #[error("insufficient points: need {needed}, have {have}")]
    InsufficientPoints { needed: usize, have: usize },

    #[error("unknown scene {0:?}")]
    UnknownScene(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("segmenter adapter `{command}` failed: {message}")]
    Adapter { command: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
