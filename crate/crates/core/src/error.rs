use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("angle {value} rad outside [-pi/2, pi/2)")]
    AngleOutOfRange { value: f64 },

    #[error("index {index} out of range (expected < {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("matrix is rank deficient: {0}")]
    RankDeficient(&'static str),

    #[error("non-finite derivative encountered during Newton refinement")]
    NonFiniteDerivative,

    #[error("gain vector is empty or has zero norm")]
    EmptyGains,

    #[error("reference channel has zero norm")]
    ZeroNormTruth,

    #[error("covariance matrix is not Hermitian positive semidefinite")]
    NotPsd,

    #[error("training length {training} must be smaller than coherence length {coherence}")]
    TrainingTooLong { training: usize, coherence: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
