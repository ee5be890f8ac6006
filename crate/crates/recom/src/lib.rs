//! Training harness, run artifacts and checkpoints on top of `recom-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod harness;
pub mod rngs;

pub use config::{CommMode, Method, RunConfig};
pub use error::{RunError, RunResult};
