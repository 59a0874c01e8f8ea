use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown replacement policy `{0}`")]
    UnknownPolicy(String),
    #[error("unknown machine profile `{0}`")]
    UnknownProfile(String),
    #[error("invalid profile `{name}`: {reason}")]
    InvalidProfile { name: String, reason: String },
    #[error("cannot parse profile {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("deadlock at cycle {cycle}: every live agent waits on a channel nobody signals")]
    Deadlock { cycle: u64 },
    #[error("agent {agent} is bound to core {core}, machine has {cores} cores")]
    BadCore {
        agent: usize,
        core: usize,
        cores: usize,
    },
}

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("candidate pool exhausted with {found} of {needed} members")]
    PoolExhausted { found: usize, needed: usize },
    #[error("accuracy is undefined for zero trials")]
    ZeroTrials,
    #[error("every trial was discarded as noisy")]
    AllTrialsDiscarded,
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("trace is truncated: {0}")]
    Truncated(String),
    #[error("trace format version {found} does not match {expected}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("malformed trace: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("output: {0}")]
    Output(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
