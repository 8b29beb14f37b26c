//! Trainable parameters and the forward computations of the search model:
//! average query encoder, zero attention over graph-enriched history,
//! user-query mixing, and product scoring.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreFn {
    #[default]
    Dot,
    Cosine,
}

impl fmt::Display for ScoreFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreFn::Dot => "dot",
            ScoreFn::Cosine => "cosine",
        })
    }
}

impl FromStr for ScoreFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(ScoreFn::Dot),
            "cosine" => Ok(ScoreFn::Cosine),
            other => Err(Error::Config(format!("unknown score function {other:?} (dot|cosine)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub n_words: usize,
    pub n_products: usize,
    pub n_sequences: usize,
    pub dim: usize,
    pub attn_dim: usize,
}

/// The seven trainable tensors. Gradients use the same container.
///
/// `attn_wf` is stored as `(d * d_a) x d`: row `a * d_a + b` holds
/// `W_f[a][b][..]`, so `pre[a][b] = W_f[a][b] . q + b_f[a][b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensors {
    pub word_embeddings: Matrix,
    pub product_embeddings: Matrix,
    pub sequence_embeddings: Matrix,
    pub attn_wf: Matrix,
    pub attn_bf: Matrix,
    pub attn_wh: Matrix,
    pub zero_inquiry: Matrix,
}

pub const TENSOR_NAMES: [&str; 7] = [
    "word_embeddings",
    "product_embeddings",
    "sequence_embeddings",
    "attn_wf",
    "attn_bf",
    "attn_wh",
    "zero_inquiry",
];

impl Tensors {
    pub fn zeros(dims: &ModelDims) -> Self {
        let d = dims.dim;
        let da = dims.attn_dim;
        Self {
            word_embeddings: Matrix::zeros(dims.n_words, d),
            product_embeddings: Matrix::zeros(dims.n_products, d),
            sequence_embeddings: Matrix::zeros(dims.n_sequences, d),
            attn_wf: Matrix::zeros(d * da, d),
            attn_bf: Matrix::zeros(d, da),
            attn_wh: Matrix::zeros(1, da),
            zero_inquiry: Matrix::zeros(1, d),
        }
    }

    pub fn named(&self) -> [(&'static str, &Matrix); 7] {
        [
            (TENSOR_NAMES[0], &self.word_embeddings),
            (TENSOR_NAMES[1], &self.product_embeddings),
            (TENSOR_NAMES[2], &self.sequence_embeddings),
            (TENSOR_NAMES[3], &self.attn_wf),
            (TENSOR_NAMES[4], &self.attn_bf),
            (TENSOR_NAMES[5], &self.attn_wh),
            (TENSOR_NAMES[6], &self.zero_inquiry),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Matrix); 7] {
        [
            (TENSOR_NAMES[0], &mut self.word_embeddings),
            (TENSOR_NAMES[1], &mut self.product_embeddings),
            (TENSOR_NAMES[2], &mut self.sequence_embeddings),
            (TENSOR_NAMES[3], &mut self.attn_wf),
            (TENSOR_NAMES[4], &mut self.attn_bf),
            (TENSOR_NAMES[5], &mut self.attn_wh),
            (TENSOR_NAMES[6], &mut self.zero_inquiry),
        ]
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            word_embeddings: z(&self.word_embeddings),
            product_embeddings: z(&self.product_embeddings),
            sequence_embeddings: z(&self.sequence_embeddings),
            attn_wf: z(&self.attn_wf),
            attn_bf: z(&self.attn_bf),
            attn_wh: z(&self.attn_wh),
            zero_inquiry: z(&self.zero_inquiry),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dim: usize,
    pub attn_dim: usize,
    /// Weight of the query in `M_uq = lambda q + (1 - lambda) u`.
    pub lambda: f64,
    pub score_fn: ScoreFn,
    pub tensors: Tensors,
}

/// Per-query attention state: `tanh(W_f^T q + b_f)` and the key vector
/// `k[a] = sum_b t[a][b] W_h[b]`, so that `s(q, i) = i . k`.
#[derive(Debug, Clone)]
pub struct QueryAttention {
    pub tanh: Vec<f64>,
    pub key: Vec<f64>,
}

impl QueryAttention {
    #[inline]
    pub fn score(&self, item: &[f64]) -> f64 {
        dot(item, &self.key)
    }
}

/// Zero-attention output: the user vector plus the attention distribution
/// (`weights[0]` is the zero slot, `weights[1 + j]` belongs to `history[j]`).
#[derive(Debug, Clone)]
pub struct UserVector {
    pub vector: Vec<f64>,
    pub weights: Vec<f64>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserContext {
    pub user: u32,
    /// Most recent first.
    pub history: Vec<u32>,
    pub query: u32,
}

impl ModelParams {
    /// Random initialization: embeddings in `[-0.5/d, 0.5/d]`, attention
    /// tensors in `[-1/sqrt(d), 1/sqrt(d)]`, zero inquiry vector at 0.
    pub fn init<R: Rng + ?Sized>(
        dims: &ModelDims,
        lambda: f64,
        score_fn: ScoreFn,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.dim == 0 || dims.attn_dim == 0 {
            return Err(Error::Config("dim and attn_dim must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda={lambda} not in [0,1]")));
        }
        let d = dims.dim;
        let da = dims.attn_dim;
        let emb = 0.5 / d as f64;
        let att = 1.0 / (d as f64).sqrt();
        let tensors = Tensors {
            word_embeddings: Matrix::uniform(dims.n_words, d, emb, rng),
            product_embeddings: Matrix::uniform(dims.n_products, d, emb, rng),
            sequence_embeddings: Matrix::uniform(dims.n_sequences, d, emb, rng),
            attn_wf: Matrix::uniform(d * da, d, att, rng),
            attn_bf: Matrix::uniform(d, da, att, rng),
            attn_wh: Matrix::uniform(1, da, att, rng),
            zero_inquiry: Matrix::zeros(1, d),
        };
        Ok(Self {
            dim: d,
            attn_dim: da,
            lambda,
            score_fn,
            tensors,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            n_words: self.tensors.word_embeddings.rows(),
            n_products: self.tensors.product_embeddings.rows(),
            n_sequences: self.tensors.sequence_embeddings.rows(),
            dim: self.dim,
            attn_dim: self.attn_dim,
        }
    }

    pub fn n_products(&self) -> usize {
        self.tensors.product_embeddings.rows()
    }

    /// Check every tensor against `dim`/`attn_dim`.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        let da = self.attn_dim;
        let t = &self.tensors;
        let expect = [
            (t.word_embeddings.cols(), d),
            (t.product_embeddings.cols(), d),
            (t.sequence_embeddings.cols(), d),
            (t.attn_wf.rows(), d * da),
            (t.attn_wf.cols(), d),
            (t.attn_bf.rows(), d),
            (t.attn_bf.cols(), da),
            (t.attn_wh.rows(), 1),
            (t.attn_wh.cols(), da),
            (t.zero_inquiry.rows(), 1),
            (t.zero_inquiry.cols(), d),
        ];
        if expect.iter().any(|(a, b)| a != b) {
            return Err(Error::Shape("model tensors do not conform to dim/attn_dim".into()));
        }
        Ok(())
    }

    /// `H(0)`: product rows stacked over sequence rows.
    pub fn initial_node_features(&self) -> Matrix {
        Matrix::vstack(
            &self.tensors.product_embeddings,
            &self.tensors.sequence_embeddings,
        )
        .expect("product and sequence embeddings share dim")
    }

    /// Mean of the query's word embeddings.
    pub fn encode_query(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("query has no tokens".into()));
        }
        let mut q = vec![0.0; self.dim];
        for &t in tokens {
            let row = self
                .tensors
                .word_embeddings
                .row(t as usize);
            axpy(1.0, row, &mut q);
        }
        let inv = 1.0 / tokens.len() as f64;
        q.iter_mut().for_each(|x| *x *= inv);
        Ok(q)
    }

    pub fn query_attention(&self, q: &[f64]) -> QueryAttention {
        let d = self.dim;
        let da = self.attn_dim;
        let wf = &self.tensors.attn_wf;
        let bf = self.tensors.attn_bf.as_slice();
        let wh = self.tensors.attn_wh.as_slice();
        let mut tanh = vec![0.0; d * da];
        let mut key = vec![0.0; d];
        for a in 0..d {
            let mut acc = 0.0;
            for b in 0..da {
                let idx = a * da + b;
                let t = (dot(wf.row(idx), q) + bf[idx]).tanh();
                tanh[idx] = t;
                acc += t * wh[b];
            }
            key[a] = acc;
        }
        QueryAttention { tanh, key }
    }

    /// `s(q, i) = (i^T tanh(W_f^T q + b_f))^T W_h`
    pub fn attention_score(&self, q: &[f64], item: &[f64]) -> f64 {
        self.query_attention(q).score(item)
    }

    /// Zero attention over `history` rows of `enriched` (product rows first).
    pub fn user_vector(&self, enriched: &Matrix, history: &[u32], q: &[f64]) -> UserVector {
        self.user_vector_with(enriched, history, &self.query_attention(q))
    }

    pub fn user_vector_with(
        &self,
        enriched: &Matrix,
        history: &[u32],
        attention: &QueryAttention,
    ) -> UserVector {
        let mut scores = Vec::with_capacity(history.len() + 1);
        scores.push(attention.score(self.tensors.zero_inquiry.as_slice()));
        for &p in history {
            scores.push(attention.score(enriched.row(p as usize)));
        }
        let weights = softmax(&scores);
        let mut vector = vec![0.0; self.dim];
        for (j, &p) in history.iter().enumerate() {
            axpy(weights[j + 1], enriched.row(p as usize), &mut vector);
        }
        UserVector {
            vector,
            weights,
            scores,
        }
    }

    /// `lambda q + (1 - lambda) u`
    pub fn mix(&self, u: &[f64], q: &[f64]) -> Vec<f64> {
        q.iter()
            .zip(u)
            .map(|(qi, ui)| self.lambda * qi + (1.0 - self.lambda) * ui)
            .collect()
    }

    /// Similarity between the mixed vector and the raw product embedding.
    pub fn score_product(&self, m_uq: &[f64], product: u32) -> f64 {
        similarity(
            self.score_fn,
            m_uq,
            self.tensors.product_embeddings.row(product as usize),
        )
    }

    /// `M_uq` for a user history and encoded query.
    pub fn mixed_vector(&self, enriched: &Matrix, history: &[u32], q: &[f64]) -> Vec<f64> {
        let u = self.user_vector(enriched, history, q);
        self.mix(&u.vector, q)
    }

    /// Candidates by descending score, ties by ascending product index.
    pub fn rank(
        &self,
        enriched: &Matrix,
        history: &[u32],
        q: &[f64],
        candidates: &[u32],
    ) -> Vec<(u32, f64)> {
        let m = self.mixed_vector(enriched, history, q);
        let scored = candidates
            .iter()
            .map(|&c| (c, self.score_product(&m, c)))
            .collect();
        sort_ranked(scored)
    }
}

/// Descending score, ascending index on ties.
pub fn sort_ranked(mut scored: Vec<(u32, f64)>) -> Vec<(u32, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
}

pub fn similarity(kind: ScoreFn, m: &[f64], p: &[f64]) -> f64 {
    match kind {
        ScoreFn::Dot => dot(m, p),
        ScoreFn::Cosine => {
            let denom = norm(m) * norm(p);
            if denom == 0.0 {
                0.0
            } else {
                dot(m, p) / denom
            }
        }
    }
}

/// Partial derivatives of `similarity` with respect to `m` and `p`, scaled by
/// `upstream` and accumulated into `dm`, `dp`.
pub fn similarity_backward(
    kind: ScoreFn,
    m: &[f64],
    p: &[f64],
    upstream: f64,
    dm: &mut [f64],
    dp: &mut [f64],
) {
    match kind {
        ScoreFn::Dot => {
            axpy(upstream, p, dm);
            axpy(upstream, m, dp);
        }
        ScoreFn::Cosine => {
            let nm = norm(m);
            let np = norm(p);
            if nm == 0.0 || np == 0.0 {
                return;
            }
            let cos = dot(m, p) / (nm * np);
            for k in 0..m.len() {
                dm[k] += upstream * (p[k] / (nm * np) - cos * m[k] / (nm * nm));
                dp[k] += upstream * (m[k] / (nm * np) - cos * p[k] / (np * np));
            }
        }
    }
}

/// Max-subtracted softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
