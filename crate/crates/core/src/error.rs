use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("position ({x:.3}, {y:.3}) lies outside the grid")]
    OutOfDomain { x: f64, y: f64 },

    #[error("{context}: linear solve did not reach tolerance (relative residual {residual:e}, tolerance {tolerance:e})")]
    Solver {
        context: &'static str,
        residual: f64,
        tolerance: f64,
    },

    #[error("time step {dt} s exceeds the admissible step {admissible} s")]
    UnstableStep { dt: f64, admissible: f64 },

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("input error: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Configuration and input problems, as opposed to runtime failures.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Input(_) | Error::Csv(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
