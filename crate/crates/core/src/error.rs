use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("partition index {y} out of range 0..={layers}")]
    InvalidPartition { y: usize, layers: usize },

    #[error("invalid system context: {0}")]
    InvalidContext(String),

    #[error("invalid DNN profile: {0}")]
    InvalidProfile(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("prediction interval is empty")]
    EmptyInterval,

    #[error("point lies outside the calibration support (dimension {dimension}: {value} not in [{lower}, {upper}])")]
    OutsideSupport {
        dimension: &'static str,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("degenerate calibration dimension `{0}` (all samples identical)")]
    DegenerateDimension(&'static str),

    #[error("rejection sampling exhausted {attempts} attempts without landing inside the box")]
    SamplingExhausted { attempts: usize },

    #[error("training failed: held-out relative MSE {relative_mse:.4e} exceeds threshold {threshold:.4e} after {epochs} epochs (final train loss {train_loss:.4e})")]
    TrainingFailure {
        relative_mse: f64,
        threshold: f64,
        epochs: usize,
        train_loss: f64,
    },

    #[error("model is not fitted: {0}")]
    NotFitted(String),

    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: u32, found: u32 },

    #[error("carbon trace row {row}: {message}")]
    TraceRow { row: usize, message: String },

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
