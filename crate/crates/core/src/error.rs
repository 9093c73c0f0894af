use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state {x} is outside the state space (lower bound {lower})")]
    StateSpace { x: f64, lower: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid time grid: {0}")]
    Grid(String),

    #[error("zero diffusion at state {x}: the transition is a point mass")]
    ZeroDiffusion { x: f64 },

    #[error("{0} is not available for model `{1}`")]
    Unsupported(&'static str, String),

    #[error("degenerate chain: {0}")]
    DegenerateChain(String),

    #[error("optimiser did not converge after {evaluations} evaluations (best point {best:?})")]
    NoConvergence { evaluations: u64, best: Vec<f64> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
