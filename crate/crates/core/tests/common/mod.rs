#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sbg_core::corpus::Query;
use sbg_core::graph::BehaviorGraph;
use sbg_core::matrix::Matrix;
use sbg_core::model::{ModelDims, ModelParams, ScoreFn};
use sbg_core::training::Example;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random bipartite graph where each (product, sequence) pair is an edge
/// with probability `p`.
pub fn random_bipartite(n_products: usize, n_sequences: usize, p: f64, rng: &mut impl Rng) -> BehaviorGraph {
    let mut edges = Vec::new();
    for i in 0..n_products {
        for s in 0..n_sequences {
            if rng.random::<f64>() < p {
                edges.push((i as u32, s as u32));
            }
        }
    }
    BehaviorGraph::from_edges(n_products, n_sequences, edges).unwrap()
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Toy model + data sized for finite differences.
pub struct ToyInstance {
    pub params: ModelParams,
    pub graph: BehaviorGraph,
    pub queries: Vec<Query>,
    pub batch: Vec<Example>,
}

pub fn toy_instance(seed: u64, dim: usize, score_fn: ScoreFn) -> ToyInstance {
    let mut r = rng(seed);
    let n_words = 20;
    let n_products = 10;
    let n_sequences = 6;
    let graph = random_bipartite(n_products, n_sequences, 0.35, &mut r);
    let dims = ModelDims {
        n_words,
        n_products,
        n_sequences,
        dim,
        attn_dim: 3,
    };
    let mut params = ModelParams::init(&dims, 0.4, score_fn, &mut r).unwrap();
    // larger values than the production init so every path carries signal
    for (_, m) in params.tensors.named_mut() {
        for x in m.as_mut_slice() {
            *x = r.random_range(-0.8..0.8);
        }
    }
    let queries: Vec<Query> = (0..3)
        .map(|q| Query {
            query_id: q,
            token_indices: (0..=q).map(|k| (q * 5 + k) % n_words as u32).collect(),
            source_category: format!("cat{q}"),
        })
        .collect();
    let mut batch = Vec::new();
    for k in 0..6u32 {
        let product = r.random_range(0..n_products as u32);
        let hist_len = (k % 4) as usize;
        let mut history: Vec<u32> = Vec::new();
        while history.len() < hist_len {
            let p = r.random_range(0..n_products as u32);
            if !history.contains(&p) {
                history.push(p);
            }
        }
        let word = if k == 5 { None } else { Some(r.random_range(0..n_words as u32)) };
        batch.push(Example {
            product,
            query: k % 3,
            history,
            word,
            neg_products: (0..2).map(|_| (product + 1 + r.random_range(0..9)) % 10).collect(),
            neg_words: if word.is_some() {
                (0..3).map(|_| r.random_range(0..n_words as u32)).collect()
            } else {
                Vec::new()
            },
        });
    }
    ToyInstance {
        params,
        graph,
        queries,
        batch,
    }
}
