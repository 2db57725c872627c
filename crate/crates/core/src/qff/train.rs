//! Mini-batch SGD on the contrastive loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grad::{example_loss, loss_gradients, SectionSample, TrainExample};
use super::params::QffParams;
use super::sampling::{sample_negatives, DEFAULT_HARD_NEGATIVES};
use crate::corpus::{KnowledgeBase, Query};
use crate::error::{Error, Result};
use crate::providers::Embedder;
use crate::retrieval::RetrievalIndex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub tau: f64,
    /// Negatives per example.
    pub negatives: usize,
    /// Hard negatives drawn from the evidence article.
    pub hard_negatives: usize,
    /// Retrieval depth the other negatives come from.
    pub k: usize,
    pub seed: u64,
    /// Emit a checkpoint every this many steps (0 = never).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            steps: 200,
            batch: 4,
            tau: 0.07,
            negatives: 15,
            hard_negatives: DEFAULT_HARD_NEGATIVES,
            k: 20,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("lr", "must be finite and >= 0"));
        }
        if self.batch < 1 {
            return Err(Error::invalid("batch", "must be >= 1"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau", "must be > 0"));
        }
        if self.negatives < 1 {
            return Err(Error::invalid("negatives", "must be >= 1"));
        }
        if self.k < 1 {
            return Err(Error::invalid("k", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub mean_loss: f64,
    /// Indices into the training set making up this step's batch.
    pub batch: Vec<usize>,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: QffParams,
    pub trace: Vec<StepLoss>,
}

/// Builds one example per query carrying evidence: the evidence section as
/// positive and negatives sampled from the query's retrieved candidates.
pub fn build_training_set(
    kb: &KnowledgeBase,
    index: &RetrievalIndex,
    embedder: &dyn Embedder,
    queries: &[Query],
    config: &TrainConfig,
) -> Result<Vec<TrainExample>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let image_of = |id: &str| kb.qff_image(id).map(<[f64]>::to_vec);
    let mut out = Vec::new();
    for q in queries {
        let (Some(article_id), Some(section_index)) = (&q.evidence_article_id, q.evidence_section_index) else {
            log::warn!("query `{}` has no evidence section, skipped for training", q.qid);
            continue;
        };
        let positive = kb
            .get(article_id)
            .and_then(|a| a.sections.get(section_index))
            .ok_or_else(|| Error::invalid(format!("query `{}`", q.qid), "evidence section not in knowledge base"))?;
        let image = q
            .image
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("query `{}`", q.qid), "image required for retrieval"))?;
        let query_vec = embedder.embed_image(image)?;
        let candidates: Vec<String> = index
            .retrieve_topk(&query_vec, config.k)?
            .into_iter()
            .map(|a| a.article_id)
            .collect();
        let negatives = sample_negatives(
            kb,
            &candidates,
            positive,
            config.negatives,
            config.hard_negatives,
            &mut rng,
        )
        .map_err(|e| e.context(format!("sampling negatives for `{}`", q.qid)))?;
        out.push(TrainExample {
            question: q.question.clone(),
            query_image: Some(query_vec.into_vec()),
            positive: SectionSample {
                section: positive.clone(),
                image: image_of(article_id),
            },
            negatives: negatives
                .into_iter()
                .map(|s| SectionSample {
                    section: s.clone(),
                    image: image_of(&s.article_id),
                })
                .collect(),
        });
    }
    Ok(out)
}

/// Mean loss of `params` over `examples`.
pub fn mean_loss(params: &QffParams, examples: &[TrainExample], tau: f64) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("examples".into()));
    }
    let losses = examples
        .par_iter()
        .map(|ex| example_loss(params, ex, tau).map(|(l, _, _)| l))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Plain SGD. Batches are drawn from a seeded shuffle of the training set,
/// reshuffled every pass. `on_checkpoint` receives the parameters every
/// `checkpoint_every` steps and after the last step.
pub fn train<F>(
    mut params: QffParams,
    examples: &[TrainExample],
    config: &TrainConfig,
    mut on_checkpoint: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &QffParams) -> Result<()>,
{
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = Vec::new();
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch);
        while batch.len() < config.batch {
            if order.is_empty() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(order.pop().expect("refilled above"));
        }
        let results = batch
            .par_iter()
            .map(|&i| loss_gradients(&params, &examples[i], config.tau))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.context(format!("step {step}")))?;
        let losses: Vec<f64> = results.iter().map(|r| r.loss).collect();
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let scale = -config.lr / results.len() as f64;
        for r in &results {
            params.add_scaled(scale, &r.grads);
        }
        if !params.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        log::debug!("step {step}: loss {mean:.6}");
        trace.push(StepLoss {
            step,
            mean_loss: mean,
            batch,
            losses,
        });
        let last = step + 1 == config.steps;
        if last || (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0) {
            on_checkpoint(step + 1, &params)?;
        }
    }
    Ok(TrainOutcome { params, trace })
}
