use thiserror::Error;

/// Failure of one of the pure numeric or raster operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComputeError {
    #[error("class index out of range: {index} (bundle has {classes} classes)")]
    ClassIndex { index: usize, classes: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("fraction {0} outside (0, 1)")]
    Fraction(f64),

    #[error("value {value} outside [0, 1] at cell {index}")]
    OutOfUnitRange { value: f64, index: usize },

    #[error("non-finite value at cell {0}")]
    NonFinite(usize),
}
