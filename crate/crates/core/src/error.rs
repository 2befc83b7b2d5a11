use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("agent {agent} has value {value} below the floor {floor}")]
    Domain { agent: usize, value: f64, floor: f64 },

    #[error("infeasible confidence band: lower bounds sum to {lower_sum}, upper bounds sum to {upper_sum}")]
    InfeasibleBand { lower_sum: f64, upper_sum: f64 },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("agent {agent} has zero total return in the batch")]
    ZeroBatchReturn { agent: usize },

    #[error("oracle grid needs {required} evaluations, budget is {budget}; use a coarser grid step")]
    BudgetExceeded { required: u128, budget: u128 },

    #[error("seed {seed}: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// True for errors caused by the caller's configuration rather than a
    /// failure during execution.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::InvalidConfig(_) | Error::Toml(_) => true,
            Error::Seed { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}
