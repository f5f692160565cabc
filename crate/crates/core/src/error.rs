use thiserror::Error;

/// Errors raised anywhere in the inference pipeline.
#[derive(Debug, Error)]
pub enum BdsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dataset validation failed ({} problem(s)):\n  {}", .0.len(), .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("ODE integration failed for grid point {point} at t={t}: {reason}")]
    Integration { point: usize, t: f64, reason: String },

    #[error("aliasing alarm: estimated tail mass {tail:.3e} exceeds tolerance for grid N={n}; increase the grid size")]
    Aliasing { tail: f64, n: usize },

    #[error("spectral inversion residue out of bounds: max |imag| = {max_imag:.3e}, min real = {min_real:.3e}")]
    InversionResidue { max_imag: f64, min_real: f64 },

    #[error("impossible transition in {context}: probability {prob:.3e} below floor")]
    ImpossibleTransition { context: String, prob: f64 },

    #[error("singular Hessian in the {block} block")]
    SingularHessian { block: &'static str },

    #[error("genome saturated: all {sites} sites occupied at t={t}")]
    GenomeSaturated { sites: usize, t: f64 },

    #[error("truncation caps too small: leaked mass {leaked:.3e}")]
    CapInsufficient { leaked: f64 },

    #[error("rejection sampling starved: acceptance rate {rate:.3e}; use unconditioned sums instead")]
    LowAcceptance { rate: f64 },

    #[error("no usable intervals: {0}")]
    NoUsableData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl BdsError {
    /// True for input/data problems, false for numerical failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            BdsError::InvalidInput(_)
                | BdsError::Validation(_)
                | BdsError::Io(_)
                | BdsError::Csv(_)
                | BdsError::NoUsableData(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, BdsError>;
