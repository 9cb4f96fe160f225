pub mod bench;
pub mod codec;
pub mod config;
pub mod data;
pub mod dense;
pub mod embedding_worker;
pub mod error;
pub mod gate;
pub mod ids;
mod le;
pub mod nn_worker;
pub mod orchestrator;
pub mod ps;
pub mod staleness;
pub mod wire;

pub use error::{Error, Result};
