use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent model/dataset/experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed or mismatched input to an operation.
    #[error("input error: {0}")]
    Input(String),
    /// Hyper-parameter outside its domain.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// Dataset or config file could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    /// Pretraining produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: {message}")]
    Training {
        epoch: usize,
        message: String,
        loss_trace: Vec<f64>,
    },
    /// The adaptation loop failed (non-finite objective, strict-mode violation).
    #[error("solver error at iteration {iteration}: {message}")]
    Solver {
        iteration: usize,
        message: String,
        objective_trace: Vec<f64>,
        alpha_trace: Vec<Vec<f64>>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
