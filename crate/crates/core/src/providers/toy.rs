use std::collections::HashSet;

use twox_hash::XxHash64;

use super::{Embedder, Embedding, Generator, Reranker};
use crate::corpus::ImageInput;
use crate::error::Result;
use crate::pipeline::prompt::{CONTEXT_MARKER, QUESTION_MARKER};
use crate::text::normalized_tokens;

/// Maximum answer length, in tokens, of the extractive generator.
pub const GENERATOR_WINDOW: usize = 8;

fn accumulate(buckets: &mut [f64], token: &str, seed: u64) {
    let h = XxHash64::oneshot(seed, token.as_bytes());
    let bucket = (h % buckets.len() as u64) as usize;
    let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
    buckets[bucket] += sign;
}

fn finish(buckets: Vec<f64>) -> Embedding {
    // Empty text, or signs cancelling out exactly, maps to e_1.
    Embedding::normalized(buckets.clone()).unwrap_or_else(|_| {
        let mut e1 = vec![0.0; buckets.len()];
        e1[0] = 1.0;
        Embedding::from_raw(e1)
    })
}

/// Signed feature hashing of the normalized tokens of `text` into `dim`
/// buckets, then unit normalization.
pub fn toy_hash_embed(text: &str, dim: usize, seed: u64) -> Embedding {
    assert!(dim >= 1, "embedding dimension must be >= 1");
    let mut buckets = vec![0.0; dim];
    for token in normalized_tokens(text) {
        accumulate(&mut buckets, &token, seed);
    }
    finish(buckets)
}

#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    dim: usize,
    seed: u64,
    name: String,
}

impl ToyEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        ToyEmbedder {
            dim,
            seed,
            name: format!("toy-hash(d={dim},seed={seed})"),
        }
    }
}

impl Embedder for ToyEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Embedding> {
        Ok(toy_hash_embed(text, self.dim, self.seed))
    }

    fn embed_image_ref(&self, reference: &str) -> Result<Embedding> {
        let mut buckets = vec![0.0; self.dim];
        accumulate(&mut buckets, reference, self.seed);
        Ok(finish(buckets))
    }
}

/// Fraction of distinct question tokens that also occur in the chunk.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyReranker;

impl Reranker for ToyReranker {
    fn rerank(&self, question: &str, chunk_text: &str) -> Result<f64> {
        let q: HashSet<String> = normalized_tokens(question).into_iter().collect();
        if q.is_empty() {
            return Ok(0.0);
        }
        let c: HashSet<String> = normalized_tokens(chunk_text).into_iter().collect();
        let shared = q.intersection(&c).count();
        Ok((shared as f64 / q.len() as f64).clamp(0.0, 1.0))
    }
}

/// Extractive generator: returns the context window of
/// `min(GENERATOR_WINDOW, n)` tokens with the most tokens found in the
/// question. The earliest window wins ties. Images are ignored.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyGenerator;

/// Splits a prompt into its (context, question) regions. The last markers
/// are used since a one-shot example in the system part repeats them.
pub(crate) fn prompt_regions(prompt: &str) -> (&str, &str) {
    let Some(ctx_pos) = prompt.rfind(CONTEXT_MARKER) else {
        return ("", "");
    };
    let after_ctx = &prompt[ctx_pos + CONTEXT_MARKER.len()..];
    match after_ctx.rfind(QUESTION_MARKER) {
        Some(q_pos) => {
            let context = after_ctx[..q_pos].trim_end_matches('\n');
            let rest = &after_ctx[q_pos + QUESTION_MARKER.len()..];
            let question = rest.lines().next().unwrap_or("");
            (context, question)
        }
        None => (after_ctx, ""),
    }
}

pub(crate) fn best_window(context: &str, question: &str) -> String {
    let tokens: Vec<&str> = context.split_whitespace().collect();
    if tokens.is_empty() {
        return String::new();
    }
    let wanted: HashSet<String> = normalized_tokens(question).into_iter().collect();
    let hits: Vec<usize> = tokens
        .iter()
        .map(|t| {
            crate::text::normalize_token(t)
                .map(|n| usize::from(wanted.contains(&n)))
                .unwrap_or(0)
        })
        .collect();
    let width = GENERATOR_WINDOW.min(tokens.len());
    let mut score: usize = hits[..width].iter().sum();
    let (mut best, mut best_start) = (score, 0);
    for start in 1..=tokens.len() - width {
        score = score + hits[start + width - 1] - hits[start - 1];
        if score > best {
            best = score;
            best_start = start;
        }
    }
    tokens[best_start..best_start + width].join(" ")
}

impl Generator for ToyGenerator {
    fn generate(&self, prompt: &str, _image: Option<&ImageInput>) -> Result<String> {
        let (context, question) = prompt_regions(prompt);
        Ok(best_window(context, question))
    }
}
