use thiserror::Error;

/// Crate-wide error type. Variants are keyed by the module that raised the
/// error so callers (and the CLI exit path) can name the failing subsystem.
#[derive(Debug, Error)]
pub enum Error {
    #[error("packet_model: {0}")]
    Packet(String),
    #[error("ingest: {0}")]
    Ingest(String),
    #[error("embedding: {0}")]
    Embedding(String),
    #[error("nids: {0}")]
    Nids(String),
    #[error("generator: {0}")]
    Generator(String),
    #[error("rollout: {0}")]
    Rollout(String),
    #[error("discriminator: {0}")]
    Discriminator(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("orchestrator: {0}")]
    Orchestrator(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors that are caller mistakes (bad configuration or CLI
    /// arguments) rather than runtime failures.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
