use thiserror::Error;

/// Errors raised by the numerical modules.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("mesh mismatch: {0}")]
    MeshMismatch(String),

    #[error("theta component {value} outside [-pi, pi]")]
    ThetaOutOfRange { value: f64 },

    #[error("no coupling constant for site {site:?}")]
    MissingCoupling { site: [i64; 2] },

    #[error("boundary condition not admissible: {0}")]
    BoundaryCondition(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("energy {z} lies within {tolerance:e} of the spectrum")]
    NearSpectrum { z: String, tolerance: f64 },

    #[error("energy grids differ between curves")]
    GridMismatch,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("function support [{lo}, {hi}] escapes the energy grid [{grid_lo}, {grid_hi}]")]
    SupportOutsideGrid {
        lo: f64,
        hi: f64,
        grid_lo: f64,
        grid_hi: f64,
    },
}

impl Error {
    pub fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
