use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("degenerate grid {ny}x{nx}: both sides must be at least {min}")]
    DegenerateGrid { ny: usize, nx: usize, min: usize },

    #[error("magnified shadow does not fit the simulation grid: radius {needed:.3} um exceeds {available:.3} um")]
    ShadowTooLarge { needed: f64, available: f64 },

    #[error("kernel has zero total transmittance")]
    ZeroKernel,

    #[error("non-finite value encountered in {stage} (iteration {iteration})")]
    NonFinite { stage: &'static str, iteration: usize },

    #[error("no PSF supplied for depth {0} cm")]
    MissingPsf(f64),

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("stage `{stage}` failed after producing {} artifacts: {source}", produced.len())]
    Stage {
        stage: String,
        source: Box<Error>,
        produced: Vec<String>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

pub(crate) fn ensure_same_dim(expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
