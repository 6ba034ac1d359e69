//! Routed module-pool networks.
//!
//! Tokens leave a dense backbone and, at every routed step, a per-step linear
//! router sends each token to `k` modules drawn from a shared pool
//! (transformer blocks, attention-only blocks, MLP-only blocks and identity
//! modules). Attention inside a module only spans the tokens that module
//! received. The crate also carries the analytics computed from routing
//! traces and input optimization against frozen routing decisions.

pub mod tensor;

mod error;
pub mod analytics;
pub mod checkpoint;
pub mod config;
pub mod dreaming;
pub mod model;
pub mod nn;
pub mod rng;
pub mod routing;
pub mod train;
pub mod verify;

pub use error::{DnaError, Result};
