use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cost value {value} outside declared bounds [{lo}, {hi}] at state {state:?}, control {control:?}")]
    CostBoundViolated {
        value: f64,
        lo: f64,
        hi: f64,
        state: Vec<f64>,
        control: Vec<f64>,
    },

    #[error("trajectory left the state box at t = {time}: {state:?}")]
    EscapedBox { time: f64, state: Vec<f64> },

    #[error("non-finite state at t = {time}")]
    BlowUp { time: f64 },

    #[error("horizon {requested} exceeds available length {available}")]
    HorizonTooLong { requested: f64, available: f64 },

    #[error("reach layer {layer} is empty (every cell escaped the box)")]
    EmptyLayer { layer: usize },

    #[error("search budget exhausted without any valid rollout")]
    NoValidRollout,

    #[error("unknown example `{0}`")]
    UnknownExample(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
