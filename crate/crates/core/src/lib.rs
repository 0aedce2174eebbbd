//! Codebook-driven benchmarking of LLM text annotation pipelines.

pub mod codebook;
pub mod efficiency;
pub mod gateway;
mod hash;
pub mod metrics;
pub mod orchestrator;
pub mod parser;
pub mod prompt;
pub mod reporting;

pub use hash::content_hash;
