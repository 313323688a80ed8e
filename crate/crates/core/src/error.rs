use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("data error at row {row}: {message}")]
    Data { row: usize, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    /// 1-based state dimension with zero sample variance.
    #[error("degenerate covariate: state dimension {dim} has zero variance")]
    DegenerateCovariate { dim: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("separation: coefficient infinity-norm {norm:.3} exceeds cap {cap}")]
    Separation { norm: f64, cap: f64 },

    #[error("behavioral fit did not converge after {iterations} iterations (score norm {score_norm:.3e}, last iterate {last:?})")]
    Convergence {
        iterations: usize,
        score_norm: f64,
        last: Vec<f64>,
    },

    #[error("singular information matrix")]
    SingularInformation,

    /// Behavioral probability of the observed action fell below the floor.
    #[error("positivity violated at trajectory {traj}, step {step}: behavioral probability {prob:.3e} below floor {floor:.1e}")]
    Positivity {
        traj: usize,
        step: usize,
        prob: f64,
        floor: f64,
    },

    #[error("solver diverged after {iterations} iterations (last finite iterate {last:?})")]
    Divergence { iterations: usize, last: Vec<f64> },

    #[error("active set is empty; use the behavioral variance")]
    EmptyActiveSet,

    #[error("singular or ill-conditioned Hessian block (condition number {condition:.3e})")]
    SingularHessian { condition: f64 },

    #[error("unsupported option: {0}")]
    Unsupported(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
