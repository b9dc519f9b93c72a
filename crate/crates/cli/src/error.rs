use beacon_core::evalbench::EvalError;
use beacon_core::hindex::HIndexError;
use beacon_core::policy::PolicyError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("table build failed: {0}")]
    Build(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("sampler protocol error: {0}")]
    Protocol(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// 2 config, 3 build, 4 I/O, 5 sampler protocol, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Build(_) => 3,
            CliError::Io(_) => 4,
            CliError::Protocol(_) => 5,
            CliError::Other(_) => 1,
        }
    }
}

impl From<HIndexError> for CliError {
    fn from(e: HIndexError) -> Self {
        let msg = e.to_string();
        match e {
            HIndexError::HorizonTooShort { .. }
            | HIndexError::InvalidGrid(..)
            | HIndexError::BadDof { .. }
            | HIndexError::StageOutOfRange { .. } => CliError::Config(msg),
            HIndexError::Io(_)
            | HIndexError::VersionMismatch { .. }
            | HIndexError::Checksum { .. }
            | HIndexError::Malformed(_) => CliError::Io(msg),
            _ => CliError::Build(msg),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        let msg = e.to_string();
        match e {
            PolicyError::Source { .. } => CliError::Protocol(msg),
            PolicyError::HIndex(inner) => inner.into(),
            PolicyError::InvalidConfig(_)
            | PolicyError::HorizonMismatch { .. }
            | PolicyError::PriorMismatch
            | PolicyError::TooEarly { .. } => CliError::Config(msg),
            _ => CliError::Other(msg),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let msg = e.to_string();
        let kind = match e {
            EvalError::Episode { source, .. } => CliError::from(*source),
            EvalError::Spawn { .. } => CliError::Protocol(String::new()),
            EvalError::InvalidStream(_) | EvalError::InvalidOptions(_) | EvalError::InvalidCost(_) => {
                CliError::Config(String::new())
            }
            EvalError::Policy(p) => p.into(),
            EvalError::HIndex(h) => h.into(),
            EvalError::Io(_) | EvalError::Csv(_) | EvalError::Json(_) => CliError::Io(String::new()),
            _ => CliError::Other(String::new()),
        };
        kind.with_message(msg)
    }
}

impl CliError {
    fn with_message(self, msg: String) -> Self {
        match self {
            CliError::Config(_) => CliError::Config(msg),
            CliError::Build(_) => CliError::Build(msg),
            CliError::Io(_) => CliError::Io(msg),
            CliError::Protocol(_) => CliError::Protocol(msg),
            CliError::Other(_) => CliError::Other(msg),
        }
    }
}
