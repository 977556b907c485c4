use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not Hermitian (relative deviation {deviation:.3e})")]
    NotHermitian { deviation: f64 },

    #[error("matrix is not unitary (deviation {deviation:.3e})")]
    NotUnitary { deviation: f64 },

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("Hermitian eigensolver did not converge")]
    EigenNonConvergence,

    #[error("overlap magnitude {magnitude:.3e} too small to define a phase")]
    UndefinedPhase { magnitude: f64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid pulse: {0}")]
    InvalidPulse(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("cannot parse operator `{input}`: {message}")]
    Parse { input: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
