//! Residual single-head cross-attention and its backward pass.
//!
//! ```text
//! out = X + softmax(X Wq (C Wk)^T / sqrt(d)) (C Wv)
//! ```

use ndarray::{Array2, Axis};

use super::params::AttentionWeights;
use crate::error::{Error, Result};

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Array2<f64>,
    context: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub x: Array2<f64>,
    pub context: Array2<f64>,
    pub weights: AttentionWeights,
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

pub fn attend(x: &Array2<f64>, context: &Array2<f64>, w: &AttentionWeights) -> Result<Array2<f64>> {
    attend_cached(x, context, w).map(|(out, _)| out)
}

pub fn attend_cached(
    x: &Array2<f64>,
    context: &Array2<f64>,
    w: &AttentionWeights,
) -> Result<(Array2<f64>, AttentionCache)> {
    if context.nrows() == 0 {
        return Err(Error::Empty("attention context".into()));
    }
    let d = x.ncols();
    if context.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: context.ncols(),
        });
    }
    if w.wq.dim() != (d, d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: w.wq.nrows(),
        });
    }
    let scale = 1.0 / (d as f64).sqrt();
    let q = x.dot(&w.wq);
    let k = context.dot(&w.wk);
    let v = context.dot(&w.wv);
    let mut attn = q.dot(&k.t()) * scale;
    softmax_rows(&mut attn);
    let out = x + &attn.dot(&v);
    Ok((
        out,
        AttentionCache {
            x: x.clone(),
            context: context.clone(),
            q,
            k,
            v,
            attn,
        },
    ))
}

/// Gradients of a scalar loss given `d_out = dL/d(out)`.
pub fn attend_backward(cache: &AttentionCache, w: &AttentionWeights, d_out: &Array2<f64>) -> AttentionGrads {
    let d = cache.x.ncols();
    let scale = 1.0 / (d as f64).sqrt();

    let d_attn = d_out.dot(&cache.v.t());
    let d_v = cache.attn.t().dot(d_out);
    // softmax Jacobian, row-wise: dS = A * (dA - sum(dA * A))
    let row_dot = (&d_attn * &cache.attn).sum_axis(Axis(1)).insert_axis(Axis(1));
    let d_scores = &cache.attn * &(&d_attn - &row_dot) * scale;
    let d_q = d_scores.dot(&cache.k);
    let d_k = d_scores.t().dot(&cache.q);

    let weights = AttentionWeights {
        wq: cache.x.t().dot(&d_q),
        wk: cache.context.t().dot(&d_k),
        wv: cache.context.t().dot(&d_v),
    };
    let x = d_out + &d_q.dot(&w.wq.t());
    let context = d_k.dot(&w.wk.t()) + d_v.dot(&w.wv.t());
    AttentionGrads { x, context, weights }
}
