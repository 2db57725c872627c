//! Analytic gradients of the contrastive loss through section encoding,
//! query fusion and question encoding.

use ndarray::Array2;

use super::attention::{attend_backward, attend_cached};
use super::loss::contrastive_loss_grad;
use super::model::{encode_section_cached, maxsim_backward, maxsim_traced, question_context, section_context};
use super::params::QffParams;
use crate::corpus::Section;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SectionSample {
    pub section: Section,
    pub image: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub question: String,
    pub query_image: Option<Vec<f64>>,
    pub positive: SectionSample,
    pub negatives: Vec<SectionSample>,
}

impl TrainExample {
    fn sections(&self) -> impl Iterator<Item = &SectionSample> {
        std::iter::once(&self.positive).chain(&self.negatives)
    }
}

#[derive(Debug, Clone)]
pub struct ExampleGradient {
    pub loss: f64,
    pub grads: QffParams,
    pub pos_score: f64,
    pub neg_scores: Vec<f64>,
    /// Smallest best-vs-runner-up cosine gap over every MaxSim in the example.
    pub min_margin: f64,
}

/// Forward pass only: `(loss, positive score, negative scores)`.
pub fn example_loss(params: &QffParams, example: &TrainExample, tau: f64) -> Result<(f64, f64, Vec<f64>)> {
    let q_ctx = question_context(params, &example.question, example.query_image.as_deref())?;
    let (q_tokens, _) = attend_cached(&params.queries, &q_ctx.matrix(params), &params.encoder)?;
    let (f_queries, _) = attend_cached(&params.queries, &q_tokens, &params.fusion)?;
    let mut scores = Vec::with_capacity(1 + example.negatives.len());
    for s in example.sections() {
        let ctx = section_context(params, &s.section, s.image.as_deref())?;
        let (h, _) = encode_section_cached(params, &f_queries, &ctx)?;
        scores.push(maxsim_traced(&h, &q_tokens)?.score);
    }
    let loss = contrastive_loss_grad(scores[0], &scores[1..], tau)?.loss;
    let pos = scores[0];
    scores.remove(0);
    Ok((loss, pos, scores))
}

pub fn loss_gradients(params: &QffParams, example: &TrainExample, tau: f64) -> Result<ExampleGradient> {
    if example.negatives.is_empty() {
        return Err(Error::invalid("negatives", "at least one negative is required"));
    }
    let mut grads = params.zeros_like();

    // forward
    let q_ctx = question_context(params, &example.question, example.query_image.as_deref())?;
    let (q_tokens, q_cache) = attend_cached(&params.queries, &q_ctx.matrix(params), &params.encoder)?;
    let (f_queries, f_cache) = attend_cached(&params.queries, &q_tokens, &params.fusion)?;
    let mut sections = Vec::with_capacity(1 + example.negatives.len());
    for s in example.sections() {
        let ctx = section_context(params, &s.section, s.image.as_deref())?;
        let (h, cache) = encode_section_cached(params, &f_queries, &ctx)?;
        let trace = maxsim_traced(&h, &q_tokens)?;
        sections.push((ctx, h, cache, trace));
    }
    let scores: Vec<f64> = sections.iter().map(|s| s.3.score).collect();
    let lv = contrastive_loss_grad(scores[0], &scores[1..], tau)?;
    let min_margin = sections.iter().map(|s| s.3.min_margin).fold(f64::INFINITY, f64::min);

    // backward through each section
    let mut d_q_tokens = Array2::zeros(q_tokens.raw_dim());
    let mut d_f_queries = Array2::zeros(f_queries.raw_dim());
    let d_scores = std::iter::once(lv.d_pos).chain(lv.d_negs.iter().copied());
    for ((ctx, h, cache, trace), g) in sections.iter().zip(d_scores) {
        let (dh, dq) = maxsim_backward(h, &q_tokens, trace, g);
        d_q_tokens += &dq;
        let ag = attend_backward(cache, &params.encoder, &dh);
        d_f_queries += &ag.x;
        ctx.backward(&ag.context, &mut grads);
        add_weights(&mut grads.encoder, &ag.weights);
    }

    // fusion block: F = attend(queries, q_tokens)
    let fg = attend_backward(&f_cache, &params.fusion, &d_f_queries);
    grads.queries += &fg.x;
    d_q_tokens += &fg.context;
    add_weights(&mut grads.fusion, &fg.weights);

    // question encoder: q_tokens = attend(queries, question context)
    let qg = attend_backward(&q_cache, &params.encoder, &d_q_tokens);
    grads.queries += &qg.x;
    q_ctx.backward(&qg.context, &mut grads);
    add_weights(&mut grads.encoder, &qg.weights);

    Ok(ExampleGradient {
        loss: lv.loss,
        grads,
        pos_score: scores[0],
        neg_scores: scores[1..].to_vec(),
        min_margin,
    })
}

fn add_weights(dst: &mut super::params::AttentionWeights, src: &super::params::AttentionWeights) {
    dst.wq += &src.wq;
    dst.wk += &src.wk;
    dst.wv += &src.wv;
}
