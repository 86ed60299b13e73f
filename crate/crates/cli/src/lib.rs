//! Config presets and pipeline stages behind the `sigmoid` binary.

pub mod config;
pub mod pipeline;
