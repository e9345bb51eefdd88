use std::path::PathBuf;

/// Broad failure classes, used by the command-line driver to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Invalid configuration or specification.
    Config,
    /// The data could not be ingested or does not fit the requested layout.
    Data,
    /// A numerical routine failed (divergence, indefinite system, ...).
    Numerical,
}

/// Errors returned by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("malformed csv: {0}")]
    Csv(String),
    #[error("non-numeric cell at row {row}, column {col}")]
    NonNumericCell { row: usize, col: usize },
    #[error("missing value at row {row}, column {col}")]
    NaNEncountered { row: usize, col: usize },
    #[error("timestamps are not strictly increasing at row {row}")]
    NonMonotonicTimestamps { row: usize },
    #[error("invalid series: {0}")]
    InvalidSeries(String),

    #[error("target split has {target} steps, need at least {required}")]
    TargetTooShort { target: usize, required: usize },
    #[error("block length {length} exceeds range length {range}")]
    BlockLongerThanRange { length: usize, range: usize },
    #[error("sample length {length} exceeds range length {range}")]
    SampleLongerThanRange { length: usize, range: usize },
    #[error("{n_samples} samples cannot fill {k} folds")]
    TooFewSamples { n_samples: usize, k: usize },
    #[error("channel {channel} has zero standard deviation")]
    ZeroStd { channel: usize },

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("gradient contains non-finite entries")]
    NonFiniteGradient,
    #[error("loss diverged ({0})")]
    NonFiniteLoss(f64),

    #[error("horizon {horizon} must be shorter than block length {length}")]
    HorizonTooLong { horizon: usize, length: usize },
    #[error("empty context")]
    EmptyContext,
    #[error("sample {index} has no scored points")]
    WhollyUnscoredSample { index: usize },

    #[error("{params} parameters exceeds the dense Hessian limit of {limit}")]
    PTooLarge { params: usize, limit: usize },
    #[error(
        "Hessian is not positive definite after damping (smallest eigenvalue {min_eigenvalue:e}); \
         try damping >= {suggested_damping:e}"
    )]
    IndefiniteAfterDamping {
        min_eigenvalue: f64,
        suggested_damping: f64,
    },
    #[error("singular linear system")]
    SingularSystem,
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("guard violated: {0}")]
    GuardViolation(String),
    #[error("utility returned a non-finite value for a subset of size {subset_size}")]
    NonFiniteUtility { subset_size: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("no scores to select from")]
    EmptyScores,
    #[error("test range of {available} steps is shorter than one instance ({required})")]
    TestRangeTooShort { available: usize, required: usize },
    #[error("corruption fraction {0} is outside [0, 1)")]
    FractionTooLarge(f64),
    #[error("labels contain a single class")]
    AllOneClass,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            InvalidSpec(_) | InvalidConfig(_) | GuardViolation(_) | PTooLarge { .. } => {
                ErrorClass::Config
            }
            MissingFile(_)
            | Io(_)
            | Csv(_)
            | NonNumericCell { .. }
            | NaNEncountered { .. }
            | NonMonotonicTimestamps { .. }
            | InvalidSeries(_)
            | TargetTooShort { .. }
            | BlockLongerThanRange { .. }
            | SampleLongerThanRange { .. }
            | TooFewSamples { .. }
            | ZeroStd { .. }
            | HorizonTooLong { .. }
            | EmptyContext
            | WhollyUnscoredSample { .. }
            | EmptyScores
            | TestRangeTooShort { .. }
            | FractionTooLarge(_)
            | AllOneClass
            | LengthMismatch { .. } => ErrorClass::Data,
            ShapeMismatch(_)
            | EmptyBatch
            | NonFiniteGradient
            | NonFiniteLoss(_)
            | IndefiniteAfterDamping { .. }
            | SingularSystem
            | RankDeficient
            | NonFiniteUtility { .. } => ErrorClass::Numerical,
        }
    }

    /// Short variant name, stable across releases; used in diagnostics.
    pub fn kind(&self) -> &'static str {
        use Error::*;
        match self {
            MissingFile(_) => "MissingFile",
            Io(_) => "Io",
            Csv(_) => "Csv",
            NonNumericCell { .. } => "NonNumericCell",
            NaNEncountered { .. } => "NaNEncountered",
            NonMonotonicTimestamps { .. } => "NonMonotonicTimestamps",
            InvalidSeries(_) => "InvalidSeries",
            TargetTooShort { .. } => "TargetTooShort",
            BlockLongerThanRange { .. } => "BlockLongerThanRange",
            SampleLongerThanRange { .. } => "SampleLongerThanRange",
            TooFewSamples { .. } => "TooFewSamples",
            ZeroStd { .. } => "ZeroStd",
            InvalidSpec(_) => "InvalidSpec",
            ShapeMismatch(_) => "ShapeMismatch",
            EmptyBatch => "EmptyBatch",
            NonFiniteGradient => "NonFiniteGradient",
            NonFiniteLoss(_) => "NonFiniteLoss",
            HorizonTooLong { .. } => "HorizonTooLong",
            EmptyContext => "EmptyContext",
            WhollyUnscoredSample { .. } => "WhollyUnscoredSample",
            PTooLarge { .. } => "PTooLarge",
            IndefiniteAfterDamping { .. } => "IndefiniteAfterDamping",
            SingularSystem => "SingularSystem",
            RankDeficient => "RankDeficient",
            GuardViolation(_) => "GuardViolation",
            NonFiniteUtility { .. } => "NonFiniteUtility",
            LengthMismatch { .. } => "LengthMismatch",
            EmptyScores => "EmptyScores",
            TestRangeTooShort { .. } => "TestRangeTooShort",
            FractionTooLarge(_) => "FractionTooLarge",
            AllOneClass => "AllOneClass",
            InvalidConfig(_) => "InvalidConfig",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
