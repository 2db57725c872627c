//! Model backends: embedders, the chunk reranker and the answer generator.
//!
//! Two families are provided. The toy family is deterministic and needs no
//! assets (hashed bag-of-words embeddings, token-overlap reranking,
//! extractive generation). The HTTP family forwards batches to a remote
//! service speaking a small JSON protocol.

mod http;
mod toy;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::ImageInput;
use crate::error::{Error, Result};

pub use http::{HttpProvider, RetryPolicy};
pub use toy::{toy_hash_embed, ToyEmbedder, ToyGenerator, ToyReranker, GENERATOR_WINDOW};

/// A unit-norm vector in provider space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Scales `values` to unit norm. Zero or non-finite input is rejected.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding", "entries must be finite"));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroVector("embedding"));
        }
        Ok(Embedding(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Wraps values that are already unit-norm (e.g. read back from an index).
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Embedding(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Embedding>;

    /// Provider-computed embedding for an opaque image reference.
    fn embed_image_ref(&self, reference: &str) -> Result<Embedding>;

    fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        texts.iter().map(|t| self.embed_text(t)).collect()
    }

    /// Pre-supplied vectors are checked and normalized locally; references go
    /// through the provider.
    fn embed_image(&self, image: &ImageInput) -> Result<Embedding> {
        match image {
            ImageInput::Vector(v) => {
                if v.len() != self.dimension() {
                    return Err(Error::DimensionMismatch {
                        expected: self.dimension(),
                        actual: v.len(),
                    });
                }
                Embedding::normalized(v.clone())
            }
            ImageInput::Reference(r) => self.embed_image_ref(r),
        }
    }
}

pub trait Reranker: Send + Sync {
    /// Relevance of `chunk_text` to `question`, in `[0, 1]`.
    fn rerank(&self, question: &str, chunk_text: &str) -> Result<f64>;

    fn rerank_batch(&self, question: &str, chunks: &[String]) -> Result<Vec<f64>> {
        chunks.iter().map(|c| self.rerank(question, c)).collect()
    }
}

pub trait Generator: Send + Sync {
    fn generate(&self, prompt: &str, image: Option<&ImageInput>) -> Result<String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Toy,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub dimension: usize,
    /// Hash seed of the toy embedder. Kept apart from the pipeline seed so
    /// fixture vectors stay valid when the training seed changes.
    pub seed: u64,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub batch_size: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Toy,
            dimension: 64,
            seed: 0,
            endpoint: None,
            timeout_ms: 30_000,
            max_in_flight: 4,
            batch_size: 32,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dimension < 1 {
            return Err(Error::invalid("provider.dimension", "must be >= 1"));
        }
        if self.timeout_ms == 0 {
            return Err(Error::invalid("provider.timeout_ms", "must be > 0"));
        }
        if self.max_in_flight == 0 {
            return Err(Error::invalid("provider.max_in_flight", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("provider.batch_size", "must be >= 1"));
        }
        if self.kind == ProviderKind::Http && self.endpoint.is_none() {
            return Err(Error::invalid("provider.endpoint", "required for the http provider"));
        }
        Ok(())
    }
}

/// The three backends a pipeline run needs.
#[derive(Clone)]
pub struct Providers {
    pub embedder: Arc<dyn Embedder>,
    pub reranker: Arc<dyn Reranker>,
    pub generator: Arc<dyn Generator>,
}

impl Providers {
    pub fn toy(dimension: usize, seed: u64) -> Self {
        Providers {
            embedder: Arc::new(ToyEmbedder::new(dimension, seed)),
            reranker: Arc::new(ToyReranker),
            generator: Arc::new(ToyGenerator),
        }
    }

    pub fn from_config(config: &ProviderConfig) -> Result<Self> {
        config.validate()?;
        match config.kind {
            ProviderKind::Toy => Ok(Self::toy(config.dimension, config.seed)),
            ProviderKind::Http => {
                let http = Arc::new(HttpProvider::new(config)?);
                Ok(Providers {
                    embedder: http.clone(),
                    reranker: http.clone(),
                    generator: http,
                })
            }
        }
    }
}
