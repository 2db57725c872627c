//! Chunk-based dynamic multi-article selection.
//!
//! Articles whose filter score lies within `theta` of the top article are
//! kept; their sections are chunked, each chunk is scored by the reranker and
//! blended with its section's filter score, and a per-article quota picks the
//! final context (`k1` chunks from the top article, `k2` from each other).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{chunk_section, render_chunk, Chunk, KnowledgeBase, Tokenizer};
use crate::error::{Error, Result};
use crate::providers::Reranker;
use crate::retrieval::ScoredArticle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk: Chunk,
    pub article_rank: usize,
    pub parent_section_qff: f64,
    pub chunk_score: f64,
    pub final_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub u: usize,
    pub theta: f64,
    pub chunk_len: usize,
    pub lambda: f64,
    pub k1: usize,
    pub k2: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            u: 3,
            theta: 0.02,
            chunk_len: 512,
            lambda: 0.2,
            k1: 3,
            k2: 1,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.u < 1 {
            return Err(Error::invalid("u", "must be >= 1"));
        }
        if !(self.theta >= 0.0) {
            return Err(Error::invalid("theta", "must be >= 0"));
        }
        if self.chunk_len < 1 {
            return Err(Error::invalid("chunk_len", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid("lambda", "must lie in [0, 1]"));
        }
        if self.k2 < 1 {
            return Err(Error::invalid("k2", "must be >= 1"));
        }
        if self.k1 < self.k2 {
            return Err(Error::invalid("k1", "must be >= k2"));
        }
        if self.k1 == self.k2 {
            log::warn!("k1 == k2 = {}: the top article gets no extra quota", self.k1);
        }
        Ok(())
    }
}

/// Keeps the first `u` articles whose filter score is within `theta` of the
/// first article's. Order is preserved; the first article is always kept.
pub fn select_articles(ranked: &[ScoredArticle], u: usize, theta: f64) -> Result<Vec<ScoredArticle>> {
    if ranked.is_empty() {
        return Err(Error::Empty("articles to select from".into()));
    }
    if u < 1 {
        return Err(Error::invalid("u", "must be >= 1"));
    }
    if !(theta >= 0.0) {
        return Err(Error::invalid("theta", "must be >= 0"));
    }
    let qff = |a: &ScoredArticle| {
        a.qff_score
            .ok_or_else(|| Error::invalid(format!("article `{}`", a.article_id), "missing filter score"))
    };
    let top = qff(&ranked[0])?;
    let mut kept = Vec::new();
    for a in ranked.iter().take(u) {
        let delta = top - qff(a)?;
        if delta <= theta {
            kept.push(a.clone());
        }
    }
    Ok(kept)
}

pub fn final_score(section_qff: f64, chunk_score: f64, lambda: f64) -> f64 {
    lambda * section_qff + (1.0 - lambda) * chunk_score
}

/// Chunks every section of every retained article and scores the chunks.
/// `question` is the question text alone; the reranker sees the rendered
/// chunk including its metadata header.
pub fn score_chunks(
    retained: &[ScoredArticle],
    kb: &KnowledgeBase,
    question: &str,
    reranker: &dyn Reranker,
    lambda: f64,
    chunk_len: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<ScoredChunk>> {
    if retained.is_empty() {
        return Err(Error::Empty("retained articles".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("lambda", "must lie in [0, 1]"));
    }
    let per_article = retained
        .par_iter()
        .enumerate()
        .map(|(pos, cand)| {
            let article = kb
                .get(&cand.article_id)
                .ok_or_else(|| Error::Empty(format!("article `{}` not in knowledge base", cand.article_id)))?;
            let mut chunks = Vec::new();
            let mut section_qff = Vec::new();
            for section in &article.sections {
                let qff = *cand.section_scores.get(section.section_index).ok_or_else(|| {
                    Error::invalid(
                        format!("article `{}`", cand.article_id),
                        format!("no filter score for section {}", section.section_index),
                    )
                })?;
                for c in chunk_section(section, chunk_len, tokenizer)? {
                    chunks.push(c);
                    section_qff.push(qff);
                }
            }
            let rendered: Vec<String> = chunks.iter().map(render_chunk).collect();
            let scores = reranker
                .rerank_batch(question, &rendered)
                .map_err(|e| e.context(format!("reranking chunks of `{}`", cand.article_id)))?;
            if scores.len() != chunks.len() {
                return Err(Error::DimensionMismatch {
                    expected: chunks.len(),
                    actual: scores.len(),
                });
            }
            Ok(chunks
                .into_iter()
                .zip(section_qff)
                .zip(scores)
                .map(|((chunk, qff), s)| ScoredChunk {
                    chunk,
                    article_rank: pos + 1,
                    parent_section_qff: qff,
                    chunk_score: s,
                    final_score: final_score(qff, s, lambda),
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_article.into_iter().flatten().collect())
}

fn by_final_desc(a: &ScoredChunk, b: &ScoredChunk) -> std::cmp::Ordering {
    b.final_score
        .total_cmp(&a.final_score)
        .then(a.chunk.section_index.cmp(&b.chunk.section_index))
        .then(a.chunk.chunk_index.cmp(&b.chunk.chunk_index))
}

/// Top `k1` chunks of article rank 1 and top `k2` of ranks `2..=d`, ordered
/// by article rank then final score.
pub fn select_chunks(scored: &[ScoredChunk], d: usize, k1: usize, k2: usize) -> Vec<ScoredChunk> {
    let mut groups: BTreeMap<usize, Vec<&ScoredChunk>> = BTreeMap::new();
    for c in scored.iter().filter(|c| c.article_rank >= 1 && c.article_rank <= d) {
        groups.entry(c.article_rank).or_default().push(c);
    }
    let mut out = Vec::new();
    for (rank, mut chunks) in groups {
        chunks.sort_by(|a, b| by_final_desc(a, b));
        let quota = if rank == 1 { k1 } else { k2 };
        out.extend(chunks.into_iter().take(quota).cloned());
    }
    out
}
