//! Forward pass of the filter: question encoding, query fusion, section
//! encoding and late-interaction scoring.

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use twox_hash::XxHash64;

use super::attention::{attend, attend_cached, AttentionCache};
use super::params::QffParams;
use crate::corpus::{Article, KnowledgeBase, Section};
use crate::error::{Error, Result};
use crate::retrieval::ScoredArticle;
use crate::text::normalized_tokens;

/// Score assigned to candidates without any section.
pub const EMPTY_ARTICLE_SCORE: f64 = -1.0;

pub fn token_id(params: &QffParams, token: &str) -> usize {
    (XxHash64::oneshot(params.shape.seed, token.as_bytes()) % params.shape.vocab as u64) as usize
}

/// What goes into an encoder context: an optional image row followed by
/// hashed token rows.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ContextInput {
    pub image: Option<Vec<f64>>,
    pub token_ids: Vec<usize>,
}

impl ContextInput {
    pub fn new(params: &QffParams, image: Option<&[f64]>, texts: &[&str]) -> Result<Self> {
        if let Some(img) = image {
            if img.len() != params.shape.image_dim {
                return Err(Error::DimensionMismatch {
                    expected: params.shape.image_dim,
                    actual: img.len(),
                });
            }
        }
        let token_ids = texts
            .iter()
            .flat_map(|t| normalized_tokens(t))
            .map(|t| token_id(params, &t))
            .collect();
        Ok(ContextInput {
            image: image.map(<[f64]>::to_vec),
            token_ids,
        })
    }

    pub fn rows(&self) -> usize {
        usize::from(self.image.is_some()) + self.token_ids.len()
    }

    pub fn matrix(&self, params: &QffParams) -> Array2<f64> {
        let mut m = Array2::zeros((self.rows(), params.shape.dim));
        let mut r = 0;
        if let Some(img) = &self.image {
            let projected = ArrayView1::from(img.as_slice()).dot(&params.image_projection);
            m.row_mut(0).assign(&projected);
            r = 1;
        }
        for &id in &self.token_ids {
            m.row_mut(r).assign(&params.token_embedding.row(id));
            r += 1;
        }
        m
    }

    /// Accumulates `d_context` into the embedding and projection gradients.
    pub fn backward(&self, d_context: &Array2<f64>, grads: &mut QffParams) {
        let mut r = 0;
        if let Some(img) = &self.image {
            let img = ArrayView1::from(img.as_slice());
            let outer = img
                .insert_axis(ndarray::Axis(1))
                .dot(&d_context.row(0).insert_axis(ndarray::Axis(0)));
            grads.image_projection += &outer;
            r = 1;
        }
        for &id in &self.token_ids {
            grads.token_embedding.row_mut(id).scaled_add(1.0, &d_context.row(r));
            r += 1;
        }
    }
}

pub(crate) fn question_context(params: &QffParams, question: &str, image: Option<&[f64]>) -> Result<ContextInput> {
    ContextInput::new(params, image, &[question])
}

pub(crate) fn section_context(params: &QffParams, section: &Section, image: Option<&[f64]>) -> Result<ContextInput> {
    if section.passage.trim().is_empty() {
        return Err(Error::Empty(format!(
            "passage of section {} of `{}`",
            section.section_index, section.article_id
        )));
    }
    ContextInput::new(
        params,
        image,
        &[&section.article_title, &section.section_title, &section.passage],
    )
}

/// Question tokens: the learnable queries attending over the image row and
/// the question's token rows.
pub fn encode_question(params: &QffParams, question: &str, image: Option<&[f64]>) -> Result<Array2<f64>> {
    let ctx = question_context(params, question, image)?;
    attend(&params.queries, &ctx.matrix(params), &params.encoder)
}

pub fn fuse_queries(params: &QffParams, q_tokens: &Array2<f64>) -> Result<Array2<f64>> {
    if q_tokens.nrows() != params.shape.n_queries {
        return Err(Error::DimensionMismatch {
            expected: params.shape.n_queries,
            actual: q_tokens.nrows(),
        });
    }
    attend(&params.queries, q_tokens, &params.fusion)
}

pub fn encode_section(
    params: &QffParams,
    f_queries: &Array2<f64>,
    section: &Section,
    image: Option<&[f64]>,
) -> Result<Array2<f64>> {
    let ctx = section_context(params, section, image)?;
    attend(f_queries, &ctx.matrix(params), &params.encoder)
}

pub(crate) fn encode_section_cached(
    params: &QffParams,
    f_queries: &Array2<f64>,
    ctx: &ContextInput,
) -> Result<(Array2<f64>, AttentionCache)> {
    attend_cached(f_queries, &ctx.matrix(params), &params.encoder)
}

/// Per-row results of a MaxSim evaluation, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MaxSimTrace {
    pub score: f64,
    /// For each row of `h`, the first row of `q_tokens` with maximal cosine.
    pub argmax: Vec<usize>,
    pub best_cos: Vec<f64>,
    /// Smallest gap between the best and runner-up cosine over all rows.
    pub min_margin: f64,
    h_norms: Vec<f64>,
    q_norms: Vec<f64>,
}

fn row_norms(m: &Array2<f64>, name: &'static str) -> Result<Vec<f64>> {
    m.rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let n = r.dot(&r).sqrt();
            if n == 0.0 {
                Err(Error::ZeroRow { matrix: name, row: i })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Mean over rows of `h` of the best cosine against any row of `q_tokens`.
pub fn maxsim(h: &Array2<f64>, q_tokens: &Array2<f64>) -> Result<f64> {
    maxsim_traced(h, q_tokens).map(|t| t.score)
}

pub fn maxsim_traced(h: &Array2<f64>, q_tokens: &Array2<f64>) -> Result<MaxSimTrace> {
    if h.nrows() == 0 || q_tokens.nrows() == 0 {
        return Err(Error::Empty("maxsim operand".into()));
    }
    if h.ncols() != q_tokens.ncols() {
        return Err(Error::DimensionMismatch {
            expected: h.ncols(),
            actual: q_tokens.ncols(),
        });
    }
    let h_norms = row_norms(h, "h")?;
    let q_norms = row_norms(q_tokens, "q_tokens")?;
    let dots = h.dot(&q_tokens.t());
    let mut argmax = Vec::with_capacity(h.nrows());
    let mut best_cos = Vec::with_capacity(h.nrows());
    let mut min_margin = f64::INFINITY;
    for (t, row) in dots.rows().into_iter().enumerate() {
        let mut best = (0, f64::NEG_INFINITY);
        let mut second = f64::NEG_INFINITY;
        for (q, &dot) in row.iter().enumerate() {
            let c = dot / (h_norms[t] * q_norms[q]);
            if c > best.1 {
                second = best.1;
                best = (q, c);
            } else if c > second {
                second = c;
            }
        }
        min_margin = min_margin.min(best.1 - second);
        argmax.push(best.0);
        best_cos.push(best.1);
    }
    let score = best_cos.iter().sum::<f64>() / h.nrows() as f64;
    Ok(MaxSimTrace {
        score,
        argmax,
        best_cos,
        min_margin,
        h_norms,
        q_norms,
    })
}

/// Given `g = dL/dscore`, returns `(dL/dh, dL/dq_tokens)`. At ties the
/// lowest-index maximizer receives the subgradient.
pub(crate) fn maxsim_backward(
    h: &Array2<f64>,
    q_tokens: &Array2<f64>,
    trace: &MaxSimTrace,
    g: f64,
) -> (Array2<f64>, Array2<f64>) {
    let mut dh = Array2::zeros(h.raw_dim());
    let mut dq = Array2::zeros(q_tokens.raw_dim());
    let scale = g / h.nrows() as f64;
    for t in 0..h.nrows() {
        let qi = trace.argmax[t];
        let (nt, nq, c) = (trace.h_norms[t], trace.q_norms[qi], trace.best_cos[t]);
        let ht = h.row(t);
        let qr = q_tokens.row(qi);
        // d cos / d t = q/(|q||t|) - cos * t/|t|^2
        dh.row_mut(t).scaled_add(scale / (nq * nt), &qr);
        dh.row_mut(t).scaled_add(-scale * c / (nt * nt), &ht);
        dq.row_mut(qi).scaled_add(scale / (nq * nt), &ht);
        dq.row_mut(qi).scaled_add(-scale * c / (nq * nq), &qr);
    }
    (dh, dq)
}

/// Encoded question plus the question-fused queries, computed once per query.
#[derive(Debug, Clone)]
pub struct QuestionState {
    pub q_tokens: Array2<f64>,
    pub f_queries: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArticleQff {
    pub score: f64,
    pub best_section: usize,
    pub section_scores: Vec<f64>,
}

impl QuestionState {
    pub fn new(params: &QffParams, question: &str, image: Option<&[f64]>) -> Result<Self> {
        let q_tokens = encode_question(params, question, image)?;
        let f_queries = fuse_queries(params, &q_tokens)?;
        Ok(QuestionState { q_tokens, f_queries })
    }

    pub fn score_section(&self, params: &QffParams, section: &Section, image: Option<&[f64]>) -> Result<f64> {
        let h = encode_section(params, &self.f_queries, section, image)?;
        maxsim(&h, &self.q_tokens)
    }

    /// Best section score; ties keep the lowest section index.
    pub fn score_article(&self, params: &QffParams, article: &Article, image: Option<&[f64]>) -> Result<ArticleQff> {
        if article.sections.is_empty() {
            return Err(Error::Empty(format!("sections of article `{}`", article.id)));
        }
        let section_scores = article
            .sections
            .iter()
            .map(|s| self.score_section(params, s, image))
            .collect::<Result<Vec<_>>>()?;
        let (best_section, score) = section_scores
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &s)| if s > best.1 { (i, s) } else { best });
        Ok(ArticleQff {
            score,
            best_section,
            section_scores,
        })
    }
}

pub fn fuse_scores(retrieval: f64, qff: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("alpha", "must lie in [0, 1]"));
    }
    Ok(alpha * retrieval + (1.0 - alpha) * qff)
}

/// Scores every candidate with the filter, fuses with the retrieval score
/// and keeps the best `u` by fused score (ties by retrieval rank).
pub fn rerank_articles(
    candidates: Vec<ScoredArticle>,
    kb: &KnowledgeBase,
    params: &QffParams,
    question: &str,
    query_image: Option<&[f64]>,
    u: usize,
    alpha: f64,
) -> Result<Vec<ScoredArticle>> {
    if candidates.is_empty() {
        return Err(Error::Empty("rerank candidates".into()));
    }
    if u < 1 {
        return Err(Error::invalid("u", "must be >= 1"));
    }
    fuse_scores(0.0, 0.0, alpha)?;
    let state = QuestionState::new(params, question, query_image)?;
    let mut scored = candidates
        .into_par_iter()
        .map(|mut cand| {
            let article = kb
                .get(&cand.article_id)
                .ok_or_else(|| Error::Empty(format!("article `{}` not in knowledge base", cand.article_id)))?;
            if article.sections.is_empty() {
                cand.qff_score = Some(EMPTY_ARTICLE_SCORE);
                cand.best_section = None;
                cand.section_scores = Vec::new();
            } else {
                let image = kb.qff_image(&cand.article_id);
                let q = state
                    .score_article(params, article, image)
                    .map_err(|e| e.context(format!("scoring article `{}`", cand.article_id)))?;
                cand.qff_score = Some(q.score);
                cand.best_section = Some(q.best_section);
                cand.section_scores = q.section_scores;
            }
            cand.fused_score = Some(fuse_scores(cand.retrieval_score, cand.qff_score.unwrap_or_default(), alpha)?);
            Ok(cand)
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| {
        b.fused_score
            .unwrap_or_default()
            .total_cmp(&a.fused_score.unwrap_or_default())
            .then(a.retrieval_rank.cmp(&b.retrieval_rank))
    });
    scored.truncate(u);
    Ok(scored)
}
