use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("quadrature failed for {what}: estimate {estimate:e}, error {error:e}")]
    Quadrature { what: String, estimate: f64, error: f64 },

    #[error("influence coefficient at lag {lag} ({class}) did not converge")]
    EtaLag { lag: usize, class: &'static str },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not Hermitian (max deviation {0:e})")]
    NotHermitian(f64),

    #[error("invalid mask: {0}")]
    Mask(String),

    #[error("invalid run specification: {0}")]
    Spec(String),

    #[error("store holds step {found}, expected step {expected}")]
    StepMismatch { expected: usize, found: usize },

    #[error("live path count {count} exceeds the cap of {cap}")]
    PathOverflow { count: usize, cap: usize },

    #[error("oracle refused: {0}")]
    OracleLimit(String),

    #[error("transport failure on rank {rank} during {phase}: {detail}")]
    Transport { rank: usize, phase: &'static str, detail: String },

    #[error("malformed message: {0}")]
    Wire(String),

    #[error("malformed eta sidecar: {0}")]
    Sidecar(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Quadrature { .. } | Error::EtaLag { .. } | Error::PathOverflow { .. })
    }
}
