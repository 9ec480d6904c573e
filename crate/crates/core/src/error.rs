use thiserror::Error;

/// Errors raised anywhere in the training and evaluation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("topology error: {0}")]
    Topology(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("simulation fault in scenario {scenario}: {message}")]
    Simulation { scenario: String, message: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("update error: {0}")]
    Update(String),

    #[error("combinatorial budget exceeded: {count} sequences (budget {budget})")]
    Budget { count: u128, budget: u128 },

    #[error("parse error in section [{section}]: {message}")]
    Parse { section: String, message: String },

    #[error("checkpoint schema `{found}` cannot be read by this build (expects `{expected}`)")]
    Migration { found: String, expected: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn parse(section: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            section: section.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by user-provided configuration rather than
    /// runtime faults.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Topology(_) | Error::Budget { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
