use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("row {row} has zero norm")]
    ZeroRow { row: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid loss configuration: {0}")]
    InvalidLossConfig(String),

    #[error("cannot split {classes} classes over {shards} shards")]
    InvalidShardCount { classes: usize, shards: usize },

    #[error("sampling ratio {0} outside (0, 1]")]
    InvalidRatio(f64),

    #[error("sample plan does not match the shard layout: {0}")]
    PlanMismatch(String),

    #[error("classifier weights changed since the forward pass")]
    StaleState,

    #[error("byte count overflows 64 bits")]
    Overflow,

    #[error("invalid cost spec: {0}")]
    InvalidCostSpec(String),

    #[error("row {row} is not unit length")]
    NotUnitRow { row: usize },

    #[error("class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("class {class} has a degenerate (zero) center")]
    DegenerateCenter { class: usize },

    #[error("every sample was removed")]
    AllRemoved,

    #[error("ground truth does not match the report: {0}")]
    TruthMismatch(String),

    #[error("no latency entry brackets stage {stage}")]
    TableMiss { stage: usize },

    #[error("cost must be positive, got {0}")]
    NonPositiveCost(f64),

    #[error("search space is empty")]
    EmptySpace,

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("epoch {epoch} outside [0, {total})")]
    EpochOutOfRange { epoch: usize, total: usize },

    #[error("invalid synthetic task: {0}")]
    InvalidSpec(String),

    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),

    #[error("loss is not finite")]
    NonFiniteLoss,

    #[error("pair set is degenerate: {0}")]
    DegeneratePairs(String),

    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    BadCrc { stored: u32, computed: u32 },

    #[error("file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("{extra} unexpected trailing bytes")]
    TrailingBytes { extra: u64 },

    #[error("value does not fit the file format: {0}")]
    FormatLimit(String),

    #[error("unsupported format version {0}")]
    VersionUnsupported(u16),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
