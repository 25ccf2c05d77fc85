use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parameter `{field}` = {value} outside [{lower}, {upper}]")]
    ParamOutOfRange {
        field: &'static str,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("non-finite state: {0}")]
    NonFiniteState(String),

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("force profiles have no overlapping time range")]
    EmptyOverlap,

    #[error("resampling grid point t = {t} outside profile range [{start}, {end}]")]
    OutOfRangeGrid { t: f64, start: f64, end: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("{period} s is not an integer multiple of {name} = {dt} s")]
    NonDivisibleTimestep {
        name: &'static str,
        period: f64,
        dt: f64,
    },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("force profile is empty")]
    EmptyProfile,

    #[error("no calibrated items registered")]
    NoCalibratedItems,

    #[error("episode already finished; call reset first")]
    EpisodeFinished,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("at least one evaluation episode is required")]
    NoEpisodes,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: time is not strictly increasing")]
    NonMonotonicTime { path: PathBuf, line: usize },

    #[error("{path}:{line}: non-finite value")]
    NonFiniteValue { path: PathBuf, line: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing policy checkpoint: {0}")]
    MissingPolicy(PathBuf),

    #[error("no held-out item registered")]
    MissingHeldOutItem,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Configuration problems map to CLI exit code 1, everything else to 2.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::ParamOutOfRange { .. }
                | Error::NonDivisibleTimestep { .. }
                | Error::NoCalibratedItems
                | Error::MissingHeldOutItem
        )
    }
}
