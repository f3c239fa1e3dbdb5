use thiserror::Error;

/// Crate-wide error type. Variants are grouped roughly by the layer that
/// raises them; the CLI maps them onto process exit codes (config errors,
/// data errors, numeric failures).
#[derive(Debug, Error)]
pub enum Error {
    // ---- numerics ----
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{context}: produced non-finite values")]
    NonFinite { context: String },

    #[error("backward needs a scalar loss node, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    // ---- environments ----
    #[error("unknown environment id '{0}'")]
    UnknownEnv(String),

    #[error("step called on a finished episode")]
    EpisodeFinished,

    #[error("invalid grid layout: {0}")]
    BadLayout(String),

    // ---- datasets and binary formats ----
    #[error("dataset contains no trajectories")]
    EmptyDataset,

    #[error("stitch split needs goal-reaching trajectories, found none")]
    NoGoalTrajectories,

    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (this build reads {expected})")]
    BadVersion { expected: u16, found: u16 },

    #[error("file truncated while reading {reading}")]
    Truncated { reading: &'static str },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("malformed file: {0}")]
    Corrupt(String),

    // ---- policy / critic ----
    #[error("timestep {t} exceeds the embedding table (max {max})")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("segment window has no valid positions")]
    AllPositionsMasked,

    // ---- trainer / config ----
    #[error("non-finite loss at step {step}; diagnostic snapshot: {snapshot}")]
    NonFiniteLoss { step: u64, snapshot: String },

    #[error("config: {0}")]
    Config(String),

    // ---- oracle / evaluation ----
    #[error("discretization too coarse: {0}")]
    GridTooCoarse(String),

    #[error("degenerate score anchors: expert return {expert} equals random return {random}")]
    DegenerateAnchors { expert: f64, random: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{}: {source}", path.display())]
    File { path: std::path::PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, Error>;
