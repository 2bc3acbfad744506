use thiserror::Error;

/// Everything that can go wrong while configuring, synthesizing or running a scenario.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("divergence at tick {tick}: {detail}")]
    Divergence { tick: u64, detail: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("synthesis failed: {0}")]
    Synthesis(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("control demand of {demand} slots exceeds {capacity} available slots")]
    Overload { demand: usize, capacity: usize },
    #[error("infeasible schedule: {0}")]
    Infeasible(String),
    #[error("invalid scenario configuration:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
