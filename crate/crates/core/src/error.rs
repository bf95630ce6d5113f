//! Shared error type for the workspace.

use thiserror::Error;

/// Errors surfaced by the simulator, model, trainer and reporting layers.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration file or config struct is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an API contract (shape mismatch, bad argument).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An operation was called in the wrong protocol state (e.g. step after done).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A loss or gradient became non-finite; `component` names the culprit.
    #[error("numerical failure in {component}: {detail}")]
    Numerical { component: String, detail: String },

    /// The replay buffer cannot serve a batch yet; retry after more data.
    #[error("not ready: {0}")]
    NotReady(String),

    /// Checkpoint or episode file could not be loaded.
    #[error("load error: {0}")]
    Load(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
    pub fn numerical(component: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            component: component.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
