//! Failure classes and their exit codes.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Invalid configuration or flags: exit 2.
    Config,
    /// Unreadable or malformed input data or checkpoints: exit 3.
    Data,
    /// Failures while computing: exit 4.
    Runtime,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Runtime => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn new(kind: Kind, error: anyhow::Error) -> Self {
        CliError { kind, error }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Tags an error with its failure class.
pub trait Classify<T> {
    fn config(self) -> CliResult<T>;
    fn data(self) -> CliResult<T>;
    fn runtime(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> CliResult<T> {
        self.map_err(|e| CliError::new(Kind::Config, e.into()))
    }

    fn data(self) -> CliResult<T> {
        self.map_err(|e| CliError::new(Kind::Data, e.into()))
    }

    fn runtime(self) -> CliResult<T> {
        self.map_err(|e| CliError::new(Kind::Runtime, e.into()))
    }
}
