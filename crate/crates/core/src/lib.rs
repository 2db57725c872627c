//! Question-focused knowledge filtering for retrieval-augmented question
//! answering: coarse retrieval, a trainable question-focused filter,
//! chunk-level selection, prompting and evaluation.

pub mod cda;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evalx;
pub mod pipeline;
pub mod providers;
pub mod qff;
pub mod retrieval;
pub mod synth;
pub mod text;

pub use config::{load_config, PipelineConfig, ResolvedConfig};
pub use error::{Error, Result};
