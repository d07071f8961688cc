//! Streaming KV-cache retrieval engine.
//!
//! A video stream (frames of synthetic tokens) is encoded once with
//! sliding-window attention; every frame's keys and values are kept in a
//! tiered store. When a question arrives, each attention layer picks the
//! frames whose mean key best matches the question's mean query, reloads
//! their cache, and decodes an answer over that retrieved context.

pub mod config;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod model;
pub mod par;
pub mod qa;
pub mod retrieval;
pub mod serving;
pub mod store;
pub mod tensor;

pub use config::{ModelConfig, RunConfig};
pub use error::{Error, Result};
