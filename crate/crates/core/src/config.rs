//! Resolved run configuration: defaults, overlaid by a flat JSON file,
//! overlaid by explicit overrides (command-line flags).

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::cda::SelectionConfig;
use crate::error::{Error, Result};
use crate::pipeline::prompt::Template;
use crate::providers::{ProviderConfig, ProviderKind};
use crate::qff::{QffShape, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Retrieval depth.
    pub k: usize,
    /// Articles kept after filtering.
    pub u: usize,
    /// Score fusion weight of the retrieval score.
    pub alpha: f64,
    pub tau: f64,
    pub theta: f64,
    pub lambda: f64,
    pub k1: usize,
    pub k2: usize,
    pub chunk_len: usize,
    pub template: Template,
    pub seed: u64,
    pub workers: usize,

    pub provider: ProviderKind,
    pub endpoint: Option<String>,
    pub provider_dim: usize,
    pub provider_seed: u64,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub batch_size: usize,

    pub n_queries: usize,
    pub qff_dim: usize,
    pub vocab: usize,

    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub negatives: usize,
    pub hard_negatives: usize,

    /// Relative tolerance of the relaxed numeric accuracy.
    pub relaxed_tolerance: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let sel = SelectionConfig::default();
        let prov = ProviderConfig::default();
        let shape = QffShape::default();
        let train = TrainConfig::default();
        PipelineConfig {
            k: 20,
            u: sel.u,
            alpha: 0.9,
            tau: 0.07,
            theta: sel.theta,
            lambda: sel.lambda,
            k1: sel.k1,
            k2: sel.k2,
            chunk_len: sel.chunk_len,
            template: Template::Evqa,
            seed: 0,
            workers: 1,
            provider: prov.kind,
            endpoint: prov.endpoint,
            provider_dim: prov.dimension,
            provider_seed: prov.seed,
            timeout_ms: prov.timeout_ms,
            max_in_flight: prov.max_in_flight,
            batch_size: prov.batch_size,
            n_queries: shape.n_queries,
            qff_dim: shape.dim,
            vocab: shape.vocab,
            lr: train.lr,
            steps: train.steps,
            batch: train.batch,
            negatives: train.negatives,
            hard_negatives: train.hard_negatives,
            relaxed_tolerance: 0.10,
        }
    }
}

impl PipelineConfig {
    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            u: self.u,
            theta: self.theta,
            chunk_len: self.chunk_len,
            lambda: self.lambda,
            k1: self.k1,
            k2: self.k2,
        }
    }

    pub fn provider_config(&self) -> ProviderConfig {
        ProviderConfig {
            kind: self.provider,
            dimension: self.provider_dim,
            seed: self.provider_seed,
            endpoint: self.endpoint.clone(),
            timeout_ms: self.timeout_ms,
            max_in_flight: self.max_in_flight,
            batch_size: self.batch_size,
        }
    }

    /// Filter shape; image rows live in provider space.
    pub fn qff_shape(&self) -> QffShape {
        QffShape {
            n_queries: self.n_queries,
            dim: self.qff_dim,
            vocab: self.vocab,
            image_dim: self.provider_dim,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            steps: self.steps,
            batch: self.batch,
            tau: self.tau,
            negatives: self.negatives,
            hard_negatives: self.hard_negatives,
            k: self.k,
            seed: self.seed,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::invalid("k", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha", "must lie in [0, 1]"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid("tau", "must be > 0"));
        }
        if self.workers < 1 {
            return Err(Error::invalid("workers", "must be >= 1"));
        }
        if !(self.relaxed_tolerance >= 0.0) {
            return Err(Error::invalid("relaxed_tolerance", "must be >= 0"));
        }
        self.selection().validate()?;
        self.provider_config().validate()?;
        self.qff_shape().validate()?;
        self.train_config().validate()?;
        Ok(())
    }
}

/// A resolved configuration plus a description of every non-default source.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub config: PipelineConfig,
    pub overrides: Vec<String>,
}

fn overlay(base: &mut Map<String, Value>, layer: &Map<String, Value>, source: &str, log: &mut Vec<String>) {
    for (key, value) in layer {
        log.push(format!("{key} = {value} ({source})"));
        base.insert(key.clone(), value.clone());
    }
}

/// Defaults < `file` < `flags`. Every override is logged and returned; the
/// merged result is validated before being returned.
pub fn load_config(file: Option<&Path>, flags: &Map<String, Value>) -> Result<ResolvedConfig> {
    let mut merged = match serde_json::to_value(PipelineConfig::default())? {
        Value::Object(m) => m,
        _ => unreachable!("config serializes to an object"),
    };
    let mut overrides = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::from(e).context(format!("reading config {}", path.display())))?;
        let layer: Map<String, Value> = serde_json::from_str(&text)
            .map_err(|e| Error::from(e).context(format!("parsing config {}", path.display())))?;
        overlay(&mut merged, &layer, "file", &mut overrides);
    }
    overlay(&mut merged, flags, "flag", &mut overrides);
    let config: PipelineConfig = serde_json::from_value(Value::Object(merged))?;
    config.validate()?;
    for o in &overrides {
        log::info!("config override: {o}");
    }
    Ok(ResolvedConfig { config, overrides })
}
