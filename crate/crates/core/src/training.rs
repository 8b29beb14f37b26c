//! Joint optimization of the retrieval and language-modeling objectives with
//! negative sampling, analytic gradients through zero attention and the linear
//! jumping convolution, and ADAM updates.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Distribution;

use crate::corpus::{DatasetSplit, Query, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalCase, Metrics};
use crate::graph::{jumping_backward, jumping_matrix, jumping_propagate, BehaviorGraph, PropagationConfig};
use crate::matrix::{axpy, dot, Matrix};
use crate::model::{similarity, similarity_backward, ModelDims, ModelParams, ScoreFn, Tensors};
use crate::seed::{rng_for, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub attn_dim: usize,
    pub lambda: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    /// Word negatives per positive word.
    pub k_w: usize,
    /// Product negatives per positive product.
    pub k_i: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a validation NDCG@10 improvement.
    pub patience: usize,
    pub propagation: PropagationConfig,
    pub seed: u64,
    pub score_fn: ScoreFn,
    pub history_cap: usize,
    pub train_sequence_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            attn_dim: 8,
            lambda: 0.5,
            batch_size: 1024,
            learning_rate: 0.001,
            adam: AdamConfig::default(),
            k_w: 5,
            k_i: 2,
            epochs: 20,
            patience: 5,
            propagation: PropagationConfig::default(),
            seed: 42,
            score_fn: ScoreFn::Dot,
            history_cap: 20,
            train_sequence_embeddings: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be finite and > 0".into()));
        }
        if self.dim == 0 || self.attn_dim == 0 {
            return Err(Error::Config("dim and attn_dim must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda={} not in [0,1]", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("adam betas must be in [0,1)".into()));
        }
        if !(self.adam.epsilon > 0.0) {
            return Err(Error::Config("adam epsilon must be > 0".into()));
        }
        self.propagation.validate()
    }
}

/// A purchase `(u, i, q)` with the user's earlier training purchases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainTriple {
    pub user: u32,
    pub product: u32,
    pub query: u32,
    pub timestamp: u64,
    /// Distinct products bought strictly before `timestamp`, most recent first.
    pub history: Vec<u32>,
}

/// One retrieval + language-model term with its negatives already drawn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub product: u32,
    pub query: u32,
    pub history: Vec<u32>,
    pub word: Option<u32>,
    pub neg_products: Vec<u32>,
    pub neg_words: Vec<u32>,
}

/// Everything the trainer reads besides the graph.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub n_words: usize,
    pub n_products: usize,
    pub queries: Vec<Query>,
    /// Words associated with each product (with multiplicity).
    pub product_words: Vec<Vec<u32>>,
    pub word_frequencies: Vec<u64>,
    pub train_products: Vec<u32>,
    pub triples: Vec<TrainTriple>,
    pub validation_cases: Vec<EvalCase>,
}

/// Build training triples from the split: every training interaction that has
/// a query, with its strictly-earlier history capped at `history_cap`.
pub fn training_triples(split: &DatasetSplit, history_cap: usize) -> Vec<TrainTriple> {
    let mut triples = Vec::new();
    for (&user, positions) in &split.user_history {
        let events: Vec<_> = positions
            .iter()
            .flat_map(|&p| split.train[p].interactions.iter())
            .collect();
        for (idx, it) in events.iter().enumerate() {
            let Some(query) = it.query else { continue };
            let mut seen = HashSet::new();
            let history: Vec<u32> = events[..idx]
                .iter()
                .rev()
                .filter(|e| e.timestamp < it.timestamp)
                .map(|e| e.product)
                .filter(|p| seen.insert(*p))
                .take(history_cap)
                .collect();
            triples.push(TrainTriple {
                user,
                product: it.product,
                query,
                timestamp: it.timestamp,
                history,
            });
        }
    }
    triples
}

/// Word sampler over `unigram^(3/4)` and uniform product sampler over the
/// training products; owns its random stream.
pub struct NegativeSampler {
    word_alias: Option<WeightedAliasIndex<f64>>,
    word_probs: Vec<f64>,
    products: Vec<u32>,
    rng: SeededRng,
}

pub const MAX_RESAMPLE: usize = 10;

impl NegativeSampler {
    pub fn new(word_frequencies: &[u64], train_products: &[u32], seed: u64) -> Result<Self> {
        if word_frequencies.is_empty() {
            return Err(Error::InvalidArgument("vocabulary is empty".into()));
        }
        let weights: Vec<f64> = word_frequencies.iter().map(|&f| (f as f64).powf(0.75)).collect();
        let total: f64 = weights.iter().sum();
        let word_probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let word_alias = if weights.len() > 1 {
            Some(
                WeightedAliasIndex::new(weights)
                    .map_err(|e| Error::InvalidArgument(format!("word sampler: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            word_alias,
            word_probs,
            products: train_products.to_vec(),
            rng: rng_for(seed, "negative-sampler"),
        })
    }

    pub fn word_probabilities(&self) -> &[f64] {
        &self.word_probs
    }

    pub fn sample_word(&mut self) -> u32 {
        match &self.word_alias {
            Some(a) => a.sample(&mut self.rng) as u32,
            None => 0,
        }
    }

    pub fn sample_product(&mut self) -> Option<u32> {
        if self.products.is_empty() {
            None
        } else {
            Some(self.products[self.rng.random_range(0..self.products.len())])
        }
    }

    /// `k` word negatives, none equal to `positive`. A negative that keeps
    /// colliding after `MAX_RESAMPLE` draws is skipped.
    pub fn word_negatives(&mut self, positive: u32, k: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            for _ in 0..MAX_RESAMPLE {
                let w = self.sample_word();
                if w != positive {
                    out.push(w);
                    break;
                }
            }
        }
        out
    }

    pub fn product_negatives(&mut self, positive: u32, k: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            for _ in 0..MAX_RESAMPLE {
                match self.sample_product() {
                    Some(p) if p != positive => {
                        out.push(p);
                        break;
                    }
                    Some(_) => continue,
                    None => break,
                }
            }
        }
        out
    }

    pub fn rng(&mut self) -> &mut SeededRng {
        &mut self.rng
    }
}

pub fn build_sampler(vocab: &Vocabulary, train_products: &[u32], seed: u64) -> Result<NegativeSampler> {
    NegativeSampler::new(vocab.frequencies(), train_products, seed)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-[log sigma(pos) + sum log sigma(-neg)]`
pub fn nce_loss(positive: f64, negatives: &[f64]) -> f64 {
    softplus(-positive) + negatives.iter().map(|&n| softplus(n)).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    /// Mean retrieval loss over the batch.
    pub loss_pr: f64,
    /// Mean language-model loss over the batch.
    pub loss_lm: f64,
}

impl StepLosses {
    pub fn total(&self) -> f64 {
        self.loss_pr + self.loss_lm
    }
}

struct QueryState {
    tokens: Vec<u32>,
    q: Vec<f64>,
    tanh: Vec<f64>,
    key: Vec<f64>,
    dq: Vec<f64>,
    dkey: Vec<f64>,
}

/// Batch-mean losses and, when `grads` is given, their gradients with respect
/// to every tensor (accumulated into `grads`, which must be zeroed).
pub fn forward_backward(
    params: &ModelParams,
    graph: &BehaviorGraph,
    propagation: &PropagationConfig,
    queries: &[Query],
    batch: &[Example],
    mut grads: Option<&mut Tensors>,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Ok(StepLosses::default());
    }
    let d = params.dim;
    let da = params.attn_dim;
    let lambda = params.lambda;
    let kind = params.score_fn;
    let scale = 1.0 / batch.len() as f64;
    let t = &params.tensors;
    let n_products = params.n_products();

    let h0 = params.initial_node_features();
    let enriched = if propagation.layers == 0 {
        h0
    } else {
        jumping_matrix(graph, &h0, propagation)?
    };

    let mut states: BTreeMap<u32, QueryState> = BTreeMap::new();
    for ex in batch {
        if states.contains_key(&ex.query) {
            continue;
        }
        let query = queries
            .get(ex.query as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown query {}", ex.query)))?;
        let q = params.encode_query(&query.token_indices)?;
        let att = params.query_attention(&q);
        states.insert(
            ex.query,
            QueryState {
                tokens: query.token_indices.clone(),
                q,
                tanh: att.tanh,
                key: att.key,
                dq: vec![0.0; d],
                dkey: vec![0.0; d],
            },
        );
    }

    let want_grad = grads.is_some();
    let mut g_enriched = if want_grad {
        Matrix::zeros(enriched.rows(), d)
    } else {
        Matrix::zeros(0, d)
    };
    let zero = t.zero_inquiry.as_slice();
    let mut loss_pr = 0.0;
    let mut loss_lm = 0.0;

    for ex in batch {
        let st = states.get_mut(&ex.query).expect("state built above");
        // zero attention: slot 0 is the learnable inquiry vector
        let n_hist = ex.history.len();
        let mut scores = Vec::with_capacity(n_hist + 1);
        scores.push(dot(zero, &st.key));
        for &p in &ex.history {
            scores.push(dot(enriched.row(p as usize), &st.key));
        }
        let alpha = crate::model::softmax(&scores);
        let mut u = vec![0.0; d];
        for (j, &p) in ex.history.iter().enumerate() {
            axpy(alpha[j + 1], enriched.row(p as usize), &mut u);
        }
        let m: Vec<f64> = st
            .q
            .iter()
            .zip(&u)
            .map(|(q, u)| lambda * q + (1.0 - lambda) * u)
            .collect();

        let pos_emb = t.product_embeddings.row(ex.product as usize);
        let pos = similarity(kind, &m, pos_emb);
        let negs: Vec<f64> = ex
            .neg_products
            .iter()
            .map(|&n| similarity(kind, &m, t.product_embeddings.row(n as usize)))
            .collect();
        let term_pr = nce_loss(pos, &negs);

        let mut term_lm = 0.0;
        let mut lm_scores = None;
        if let Some(w) = ex.word {
            let wpos = dot(t.word_embeddings.row(w as usize), pos_emb);
            let wnegs: Vec<f64> = ex
                .neg_words
                .iter()
                .map(|&n| dot(t.word_embeddings.row(n as usize), pos_emb))
                .collect();
            term_lm = nce_loss(wpos, &wnegs);
            lm_scores = Some((wpos, wnegs));
        }
        if !term_pr.is_finite() || !term_lm.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss for triple (product={}, query={}, history={:?})",
                ex.product, ex.query, ex.history
            )));
        }
        loss_pr += term_pr;
        loss_lm += term_lm;

        let Some(g) = grads.as_deref_mut() else { continue };

        // retrieval: d/dpos of softplus(-pos) is sigmoid(pos) - 1
        let mut dm = vec![0.0; d];
        let dpos = (sigmoid(pos) - 1.0) * scale;
        similarity_backward(
            kind,
            &m,
            pos_emb,
            dpos,
            &mut dm,
            g.product_embeddings.row_mut(ex.product as usize),
        );
        for (&n, &s) in ex.neg_products.iter().zip(&negs) {
            similarity_backward(
                kind,
                &m,
                t.product_embeddings.row(n as usize),
                sigmoid(s) * scale,
                &mut dm,
                g.product_embeddings.row_mut(n as usize),
            );
        }
        axpy(lambda, &dm, &mut st.dq);
        let du: Vec<f64> = dm.iter().map(|x| (1.0 - lambda) * x).collect();

        if n_hist > 0 {
            // u = sum_j alpha_j h_j over history slots; the zero slot adds nothing.
            let mut dalpha = vec![0.0; n_hist + 1];
            for (j, &p) in ex.history.iter().enumerate() {
                let h = enriched.row(p as usize);
                dalpha[j + 1] = dot(&du, h);
                axpy(alpha[j + 1], &du, g_enriched.row_mut(p as usize));
            }
            let mean: f64 = alpha.iter().zip(&dalpha).map(|(a, g)| a * g).sum();
            let ds: Vec<f64> = alpha
                .iter()
                .zip(&dalpha)
                .map(|(a, g)| a * (g - mean))
                .collect();
            axpy(ds[0], &st.key, g.zero_inquiry.as_mut_slice());
            axpy(ds[0], zero, &mut st.dkey);
            for (j, &p) in ex.history.iter().enumerate() {
                let s = ds[j + 1];
                axpy(s, &st.key, g_enriched.row_mut(p as usize));
                axpy(s, enriched.row(p as usize), &mut st.dkey);
            }
        }

        if let (Some(w), Some((wpos, wnegs))) = (ex.word, lm_scores) {
            let dw = (sigmoid(wpos) - 1.0) * scale;
            axpy(dw, t.word_embeddings.row(w as usize), g.product_embeddings.row_mut(ex.product as usize));
            axpy(dw, pos_emb, g.word_embeddings.row_mut(w as usize));
            for (&n, &s) in ex.neg_words.iter().zip(&wnegs) {
                let dn = sigmoid(s) * scale;
                axpy(dn, t.word_embeddings.row(n as usize), g.product_embeddings.row_mut(ex.product as usize));
                axpy(dn, pos_emb, g.word_embeddings.row_mut(n as usize));
            }
        }
    }

    if let Some(g) = grads {
        let wh = t.attn_wh.as_slice();
        for st in states.values_mut() {
            // key[a] = sum_b tanh(pre[a][b]) wh[b]
            for a in 0..d {
                let dk = st.dkey[a];
                if dk == 0.0 {
                    continue;
                }
                for b in 0..da {
                    let idx = a * da + b;
                    let th = st.tanh[idx];
                    g.attn_wh.as_mut_slice()[b] += dk * th;
                    let dpre = dk * wh[b] * (1.0 - th * th);
                    g.attn_bf.as_mut_slice()[idx] += dpre;
                    axpy(dpre, &st.q, g.attn_wf.row_mut(idx));
                    axpy(dpre, t.attn_wf.row(idx), &mut st.dq);
                }
            }
            let inv = 1.0 / st.tokens.len() as f64;
            for &tok in &st.tokens {
                axpy(inv, &st.dq, g.word_embeddings.row_mut(tok as usize));
            }
        }
        let g_h0 = if propagation.layers == 0 {
            g_enriched
        } else {
            jumping_backward(graph, &g_enriched, propagation)?
        };
        for i in 0..n_products {
            axpy(1.0, g_h0.row(i), g.product_embeddings.row_mut(i));
        }
        for s in 0..g.sequence_embeddings.rows() {
            axpy(1.0, g_h0.row(n_products + s), g.sequence_embeddings.row_mut(s));
        }
    }

    Ok(StepLosses {
        loss_pr: loss_pr * scale,
        loss_lm: loss_lm * scale,
    })
}

/// Dense ADAM state over all tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    learning_rate: f64,
    first: Tensors,
    second: Tensors,
    steps: i32,
}

impl Adam {
    pub fn new(params: &ModelParams, config: AdamConfig, learning_rate: f64) -> Self {
        Self {
            config,
            learning_rate,
            first: params.tensors.zeros_like(),
            second: params.tensors.zeros_like(),
            steps: 0,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &Tensors, skip_sequences: bool) {
        self.steps += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.steps);
        let bias2 = 1.0 - c.beta2.powi(self.steps);
        let lr = self.learning_rate;
        let targets = params.tensors.named_mut();
        let firsts = self.first.named_mut();
        let seconds = self.second.named_mut();
        let gs = grads.named();
        for (((p, m), v), g) in targets.into_iter().zip(firsts).zip(seconds).zip(gs) {
            if skip_sequences && p.0 == "sequence_embeddings" {
                continue;
            }
            let p = p.1.as_mut_slice();
            let m = m.1.as_mut_slice();
            let v = v.1.as_mut_slice();
            for (((pi, mi), vi), gi) in p.iter_mut().zip(m).zip(v).zip(g.1.as_slice()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bias1;
                let vhat = *vi / bias2;
                *pi -= lr * mhat / (vhat.sqrt() + c.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub losses: StepLosses,
    pub grad_norm: f64,
}

/// Draw negatives (and a positive word) for a slice of triples.
pub fn assemble_batch(
    triples: &[&TrainTriple],
    product_words: &[Vec<u32>],
    sampler: &mut NegativeSampler,
    k_w: usize,
    k_i: usize,
) -> Vec<Example> {
    triples
        .iter()
        .map(|tr| {
            let words = &product_words[tr.product as usize];
            let word = if words.is_empty() {
                None
            } else {
                let idx = sampler.rng().random_range(0..words.len());
                Some(words[idx])
            };
            let neg_products = sampler.product_negatives(tr.product, k_i);
            let neg_words = match word {
                Some(w) => sampler.word_negatives(w, k_w),
                None => Vec::new(),
            };
            Example {
                product: tr.product,
                query: tr.query,
                history: tr.history.clone(),
                word,
                neg_products,
                neg_words,
            }
        })
        .collect()
}

/// One optimization step on a prepared batch.
pub fn step(
    params: &mut ModelParams,
    optimizer: &mut Adam,
    graph: &BehaviorGraph,
    queries: &[Query],
    batch: &[Example],
    config: &TrainConfig,
) -> Result<StepReport> {
    let mut grads = params.tensors.zeros_like();
    let losses = forward_backward(
        params,
        graph,
        &config.propagation,
        queries,
        batch,
        Some(&mut grads),
    )?;
    let grad_norm = grads
        .named()
        .iter()
        .map(|(_, m)| m.as_slice().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    optimizer.update(params, &grads, !config.train_sequence_embeddings);
    if !params.tensors.is_finite() {
        return Err(Error::Diverged("parameters became non-finite".into()));
    }
    Ok(StepReport { losses, grad_norm })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_pr: f64,
    pub loss_lm: f64,
    pub validation: Option<Metrics>,
    pub wall_seconds: f64,
}

pub fn metrics_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss_pr,loss_lm,val_hr10,val_ndcg10,val_mrr,wall_seconds\n");
    for e in log {
        let v = e.validation.unwrap_or_default();
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
            e.epoch, e.loss_pr, e.loss_lm, v.hr_10, v.ndcg_10, v.mrr_100, e.wall_seconds
        ));
    }
    s
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best: ModelParams,
    /// 1-based epoch of `best`; 0 if no epoch completed.
    pub best_epoch: usize,
    pub best_validation: Option<Metrics>,
    pub log: Vec<EpochLog>,
    /// Set when training stopped on divergence; `best` is the last good state.
    pub aborted: Option<Error>,
}

pub fn initial_params(data: &TrainingData, graph: &BehaviorGraph, config: &TrainConfig) -> Result<ModelParams> {
    let dims = ModelDims {
        n_words: data.n_words,
        n_products: data.n_products,
        n_sequences: graph.n_sequences(),
        dim: config.dim,
        attn_dim: config.attn_dim,
    };
    ModelParams::init(&dims, config.lambda, config.score_fn, &mut rng_for(config.seed, "init"))
}

/// Validation metrics for `params` (None without validation cases).
pub fn validate(
    params: &ModelParams,
    graph: &BehaviorGraph,
    propagation: &PropagationConfig,
    data: &TrainingData,
) -> Result<Option<Metrics>> {
    if data.validation_cases.is_empty() {
        return Ok(None);
    }
    let enriched = jumping_propagate(graph, &params.initial_node_features(), propagation)?;
    let rep = evaluate(params, &enriched.matrix, &data.queries, &data.validation_cases, "validation")?;
    Ok(Some(rep.metrics))
}

/// Epoch loop with best-validation-NDCG@10 selection and early stopping.
/// Deterministic for a fixed seed.
pub fn train(data: &TrainingData, graph: &BehaviorGraph, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if graph.n_products() != data.n_products {
        return Err(Error::Shape(format!(
            "graph has {} products, data has {}",
            graph.n_products(),
            data.n_products
        )));
    }
    let mut params = initial_params(data, graph, config)?;
    let mut optimizer = Adam::new(&params, config.adam, config.learning_rate);
    let mut sampler = NegativeSampler::new(&data.word_frequencies, &data.train_products, config.seed)?;
    let mut shuffle_rng = rng_for(config.seed, "shuffle");

    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_validation: Option<Metrics> = None;
    let mut log = Vec::new();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..data.triples.len()).collect();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut sum_pr = 0.0;
        let mut sum_lm = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let triples: Vec<&TrainTriple> = chunk.iter().map(|&i| &data.triples[i]).collect();
            let batch = assemble_batch(&triples, &data.product_words, &mut sampler, config.k_w, config.k_i);
            match step(&mut params, &mut optimizer, graph, &data.queries, &batch, config) {
                Ok(r) => {
                    sum_pr += r.losses.loss_pr * batch.len() as f64;
                    sum_lm += r.losses.loss_lm * batch.len() as f64;
                    seen += batch.len();
                }
                Err(e) => {
                    return Ok(TrainOutcome {
                        best,
                        best_epoch,
                        best_validation,
                        log,
                        aborted: Some(e),
                    })
                }
            }
        }
        let validation = validate(&params, graph, &config.propagation, data)?;
        let n = seen.max(1) as f64;
        log.push(EpochLog {
            epoch,
            loss_pr: sum_pr / n,
            loss_lm: sum_lm / n,
            validation,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        let improved = match (validation, best_validation) {
            (None, _) => true,
            (Some(_), None) => true,
            (Some(v), Some(b)) => v.ndcg_10 > b.ndcg_10,
        };
        if improved {
            best = params.clone();
            best_epoch = epoch;
            best_validation = validation;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_validation,
        log,
        aborted: None,
    })
}

/// Per-tensor gradient agreement: `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub tensor: &'static str,
    pub relative_error: f64,
    pub analytic_norm: f64,
}

/// Central finite differences of the batch loss for every entry of every
/// tensor. Test-sized instances only.
pub fn check_gradients(
    params: &ModelParams,
    graph: &BehaviorGraph,
    propagation: &PropagationConfig,
    queries: &[Query],
    batch: &[Example],
    h: f64,
) -> Result<Vec<GradientCheck>> {
    let mut analytic = params.tensors.zeros_like();
    forward_backward(params, graph, propagation, queries, batch, Some(&mut analytic))?;
    let mut work = params.clone();
    let mut out = Vec::new();
    for ti in 0..7 {
        let (name, len) = {
            let named = params.tensors.named();
            (named[ti].0, named[ti].1.as_slice().len())
        };
        let mut numeric = vec![0.0; len];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = work.tensors.named()[ti].1.as_slice()[e];
            work.tensors.named_mut()[ti].1.as_mut_slice()[e] = orig + h;
            let up = forward_backward(&work, graph, propagation, queries, batch, None)?.total();
            work.tensors.named_mut()[ti].1.as_mut_slice()[e] = orig - h;
            let down = forward_backward(&work, graph, propagation, queries, batch, None)?.total();
            work.tensors.named_mut()[ti].1.as_mut_slice()[e] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let a = analytic.named()[ti].1.as_slice();
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na.max(nn);
        out.push(GradientCheck {
            tensor: name,
            relative_error: if denom == 0.0 { 0.0 } else { diff / denom },
            analytic_norm: na,
        });
    }
    Ok(out)
}
