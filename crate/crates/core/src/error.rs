use thiserror::Error;

/// Errors surfaced by the calibration, modeling, and data layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty fit split")]
    EmptyFitSplit,

    #[error("split of n={n} cannot give every subset at least one element")]
    SplitTooSmall { n: usize },

    #[error("split fractions must be positive and sum to 1 (got sum {sum})")]
    BadFractions { sum: f64 },

    #[error("weights must be positive")]
    NonPositiveWeight,

    #[error("invalid level {level}: must lie in (0, 1)")]
    BadLevel { level: f64 },

    #[error("beta {beta} must lie in (0, alpha={alpha})")]
    BadBeta { alpha: f64, beta: f64 },

    #[error("fewer than 2 rows to fit on")]
    TooFewRows,

    #[error("quantile level {tau} must lie in (0, 1)")]
    BadTau { tau: f64 },

    #[error("target has missing values")]
    MissingTarget,

    #[error("single-class input: logistic fit needs both classes")]
    SingleClass,

    #[error("k must be positive")]
    BadClusterCount,

    #[error("need at least k={k} rows, got {rows}")]
    TooFewRowsForClusters { k: usize, rows: usize },

    #[error("singular design matrix in least squares")]
    SingularDesign,

    #[error("empty error pool")]
    EmptyErrorPool,

    #[error("reference errors are empty")]
    NoReferenceErrors,

    #[error("weight normalization singular")]
    SingularNormalization,

    #[error("true weighted threshold sits at the infinite atom (k_wcp = n + 1)")]
    ThresholdAtInfinity,

    #[error("error bounds invalid: delta_min {delta_min} must be < delta_max {delta_max}")]
    BadErrorBounds { delta_min: f64, delta_max: f64 },

    #[error("unknown error distribution '{name}'")]
    UnknownDistribution { name: String },

    #[error("constant PI projection")]
    ConstantPiProjection,

    #[error("marginal corruption rate 0.2 unreachable (survivor mass too small)")]
    MarginalUnreachable,

    #[error("sample index {index} unknown to this generator (n = {n})")]
    UnknownSample { index: usize, n: usize },

    #[error("generator parameters required but not available")]
    GeneratorRequired,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("csv parse error at line {line}: {message}")]
    CsvParse { line: usize, message: String },

    #[error("inconsistent sample: {0}")]
    DataInvariant(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
