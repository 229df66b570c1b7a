use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid market config: {0}")]
    InvalidMarket(String),
    #[error("invalid agent config: {0}")]
    InvalidAgent(String),
    #[error("config line {line}: {message}")]
    ConfigLine { line: usize, message: String },
    #[error("episode is already terminal")]
    EpisodeTerminal,
    #[error("episode trace is incomplete")]
    IncompleteTrace,
    #[error("state encoder supports exactly 3 fare classes, got {0}")]
    UnsupportedClassCount(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("malformed weights file: {0}")]
    Weights(String),
    #[error("replay buffer holds {size} experiences, cannot sample {requested}")]
    UnderfilledBuffer { size: usize, requested: usize },
    #[error("cannot aggregate an empty metrics list")]
    EmptyAggregate,
    #[error("negative oracle revenue {0}")]
    NegativeOracle(f64),
    #[error("hindsight bound requires every bump factor >= 1, got {0}")]
    BumpFactorTooSmall(f64),
    #[error("state space of {states} exceeds the enumeration budget of {budget}")]
    StateBudget { states: usize, budget: usize },
    #[error("invalid tiny MDP: {0}")]
    InvalidTiny(String),
    #[error("grid cell (cancel {cancel_rate}, distribution {distribution}) failed: {source}")]
    GridCell {
        cancel_rate: f64,
        distribution: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
