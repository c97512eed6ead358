use thiserror::Error;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented domain constraint (non-finite state, negative cost, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// A configuration value violated its invariants.
    #[error("configuration error: {0}")]
    Config(String),
    /// A dimension mismatch between matrices, vectors or parameter blocks.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A factorization or recursion failed even after jitter escalation.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Dynamics fitting failed at a specific time step (0-based).
    #[error("fit failed at step {step}: {reason}")]
    Fit { step: usize, reason: String },
    /// The information-matrix covariance minor left the unit interval.
    #[error("information matrix bound violated at step {step}: eigenvalue {eigenvalue}")]
    InformationBound { step: usize, eigenvalue: String },
    /// Training diverged.
    #[error("training produced a non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    /// A referenced artifact (snapshot, rollout, file) does not exist.
    #[error("missing: {0}")]
    Missing(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable kind, used by the CLI error JSON and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Dimension(_) => "dimension",
            Error::Numerical(_) => "numerical",
            Error::Fit { .. } => "fit",
            Error::InformationBound { .. } => "information_bound",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Missing(_) => "missing",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
