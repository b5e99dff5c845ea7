use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration or ill-formed input. `path` is the offending key
    /// path inside the document (e.g. `g.kind`).
    #[error("{path}: {message}")]
    Config { path: String, message: String },

    /// A coefficient map produced a non-finite value.
    #[error("model evaluation produced a non-finite {component} (node {node})")]
    ModelEval {
        component: &'static str,
        node: usize,
    },

    /// The sampled dissipativity probe found no admissible radius.
    #[error(
        "dissipativity probe failed at level {lambda}: no radius in the sampled range qualifies"
    )]
    DissipativityProbe { lambda: f64 },

    /// Implicit drift solve did not converge.
    #[error("implicit drift solve did not converge after {iterations} iterations (residual {residual:.3e})")]
    SolverNonConvergence { iterations: usize, residual: f64 },

    /// An experiment ran but its result is invalid (e.g. exploded paths on a
    /// scheme that the experiment requires to be stable).
    #[error("experiment invalid: {0}")]
    ExperimentInvalid(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
