use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter vector: {0}")]
    InvalidParameters(String),

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("simulation diverged at time index {t}")]
    SimulationDiverged { t: usize },

    #[error("innovation covariance is singular at time index {t}")]
    SingularInnovation { t: usize },

    #[error("filtered covariance is singular at time index {t}")]
    SingularCovariance { t: usize },

    #[error("extended Kalman filter diverged at time index {t}: {reason}")]
    DivergedFilter { t: usize, reason: String },

    #[error("model does not expose additive-Gaussian structure required by {0}")]
    MissingStructure(&'static str),

    #[error("approximate smoothing Hessian is not positive definite at block {block}")]
    IndefiniteHessian { block: usize },

    #[error("Gauss-Newton made no progress after {iterations} iterations (|grad|_inf = {grad_norm:e})")]
    NoProgress {
        iterations: usize,
        grad_norm: f64,
        last: Vec<f64>,
    },

    #[error("all particle weights are zero at time index {t}")]
    DegenerateWeights { t: usize },

    #[error("rejection bound {rho} is below an encountered transition density {density} at time index {t}")]
    InvalidBound { t: usize, rho: f64, density: f64 },

    #[error("smoothed moments are insufficient: {0}")]
    InsufficientMoments(String),

    #[error("log-likelihood evaluation is not finite for coordinate {coordinate}")]
    NonFiniteLoglik { coordinate: usize },

    #[error("line search exhausted without an acceptable step")]
    ZeroStep,

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by user input rather than a numerical failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidParameters(_)
                | Error::InvalidSpec(_)
                | Error::Dimension(_)
                | Error::MissingStructure(_)
        )
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Error {
        Error::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }
}
