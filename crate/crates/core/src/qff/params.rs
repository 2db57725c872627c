use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QffShape {
    /// Number of learnable queries (token rows of every encoded matrix).
    pub n_queries: usize,
    pub dim: usize,
    /// Hash vocabulary size.
    pub vocab: usize,
    pub image_dim: usize,
    /// Seeds both initialization and token hashing.
    pub seed: u64,
}

impl Default for QffShape {
    fn default() -> Self {
        QffShape {
            n_queries: 8,
            dim: 32,
            vocab: 4096,
            image_dim: 64,
            seed: 0,
        }
    }
}

impl QffShape {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("qff.n_queries", self.n_queries),
            ("qff.dim", self.dim),
            ("qff.vocab", self.vocab),
            ("qff.image_dim", self.image_dim),
        ] {
            if v < 1 {
                return Err(Error::invalid(name, "must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Query/key/value projections of one residual cross-attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

impl AttentionWeights {
    pub fn zeros(dim: usize) -> Self {
        AttentionWeights {
            wq: Array2::zeros((dim, dim)),
            wk: Array2::zeros((dim, dim)),
            wv: Array2::zeros((dim, dim)),
        }
    }
}

/// Every learnable tensor of the filter. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct QffParams {
    pub shape: QffShape,
    pub token_embedding: Array2<f64>,
    pub image_projection: Array2<f64>,
    pub queries: Array2<f64>,
    /// Shared by question and section encoding.
    pub encoder: AttentionWeights,
    /// Injects the encoded question into the queries.
    pub fusion: AttentionWeights,
}

pub const TENSOR_NAMES: [&str; 9] = [
    "token_embedding",
    "image_projection",
    "queries",
    "encoder.wq",
    "encoder.wk",
    "encoder.wv",
    "fusion.wq",
    "fusion.wk",
    "fusion.wv",
];

impl QffParams {
    /// Entries drawn uniformly from `[-1/sqrt(d), 1/sqrt(d)]`.
    pub fn init(shape: QffShape) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(shape.seed);
        let bound = 1.0 / (shape.dim as f64).sqrt();
        let mut params = Self::zeros(shape);
        for t in params.tensors_mut() {
            t.mapv_inplace(|_| rng.gen_range(-bound..=bound));
        }
        Ok(params)
    }

    pub fn zeros(shape: QffShape) -> Self {
        let d = shape.dim;
        QffParams {
            shape,
            token_embedding: Array2::zeros((shape.vocab, d)),
            image_projection: Array2::zeros((shape.image_dim, d)),
            queries: Array2::zeros((shape.n_queries, d)),
            encoder: AttentionWeights::zeros(d),
            fusion: AttentionWeights::zeros(d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape)
    }

    /// Tensors in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> [&Array2<f64>; 9] {
        [
            &self.token_embedding,
            &self.image_projection,
            &self.queries,
            &self.encoder.wq,
            &self.encoder.wk,
            &self.encoder.wv,
            &self.fusion.wq,
            &self.fusion.wk,
            &self.fusion.wv,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<f64>; 9] {
        [
            &mut self.token_embedding,
            &mut self.image_projection,
            &mut self.queries,
            &mut self.encoder.wq,
            &mut self.encoder.wk,
            &mut self.encoder.wv,
            &mut self.fusion.wq,
            &mut self.fusion.wk,
            &mut self.fusion.wv,
        ]
    }

    pub fn expected_dims(&self) -> [(usize, usize); 9] {
        let s = self.shape;
        let dd = (s.dim, s.dim);
        [
            (s.vocab, s.dim),
            (s.image_dim, s.dim),
            (s.n_queries, s.dim),
            dd,
            dd,
            dd,
            dd,
            dd,
            dd,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, scale: f64, other: &QffParams) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.scaled_add(scale, src);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.iter().map(|x| x * x).sum::<f64>()).sum()
    }
}
