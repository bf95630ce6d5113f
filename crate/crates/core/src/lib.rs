//! Object-centric world-model learning on a deterministic 2D manipulation
//! simulator: latent dynamics, per-object decoders, object-state entropy
//! exploration, imagination actor-critic, and the training/report plumbing
//! around them.

pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod explore;
pub mod metrics;
pub mod replay;
pub mod report;
pub mod sim;
pub mod tensor;
pub mod trainer;
pub mod wm;

pub use error::{Error, Result};
