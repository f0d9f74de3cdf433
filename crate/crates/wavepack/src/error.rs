use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("ellipticity violation: {0}")]
    Ellipticity(String),
    #[error("problem too large: {0}")]
    Size(String),
    #[error("tolerance not met: {0}")]
    Tolerance(String),
    #[error("iteration diverged: {0}")]
    Divergence(String),
    #[error("unstable time stepping: {0}")]
    Instability(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
