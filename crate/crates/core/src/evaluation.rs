//! Candidate-pool construction and single-target ranking metrics.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{DatasetSplit, Query, SuccessiveSequence};
use crate::error::{Error, Result};
use crate::matrix::{compensated_sum, norm, Matrix};
use crate::model::{ModelParams, ScoreFn};

pub const DEFAULT_POOL_SIZE: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCase {
    pub user: u32,
    pub query: u32,
    pub target: u32,
    /// Target first, then sampled negatives.
    pub candidates: Vec<u32>,
    /// The user's training history, most recent first.
    pub history: Vec<u32>,
}

/// One case per distinct `(user, query, target)` in each sequence. Negatives
/// are drawn uniformly without replacement from `universe` minus the target;
/// if the universe is smaller than `pool_size` the pool is the full universe.
pub fn build_cases<R: Rng + ?Sized>(
    sequences: &[SuccessiveSequence],
    split: &DatasetSplit,
    history_cap: usize,
    pool_size: usize,
    rng: &mut R,
) -> Result<Vec<EvalCase>> {
    if pool_size == 0 {
        return Err(Error::InvalidArgument("pool_size must be >= 1".into()));
    }
    let universe = &split.train_products;
    let pool = pool_size.min(universe.len());
    let mut cases = Vec::new();
    for seq in sequences {
        let history = split.recent_history(seq.user, history_cap);
        let mut seen = HashSet::new();
        for it in &seq.interactions {
            let Some(query) = it.query else { continue };
            if !seen.insert((query, it.product)) {
                continue;
            }
            let Ok(pos) = universe.binary_search(&it.product) else {
                continue;
            };
            let mut candidates = Vec::with_capacity(pool);
            candidates.push(it.product);
            let picks = rand::seq::index::sample(rng, universe.len() - 1, pool - 1);
            for i in picks.iter() {
                let idx = if i < pos { i } else { i + 1 };
                candidates.push(universe[idx]);
            }
            cases.push(EvalCase {
                user: seq.user,
                query,
                target: it.product,
                candidates,
                history: history.clone(),
            });
        }
    }
    Ok(cases)
}

pub fn metric_hr(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1);
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Single relevant item: `1 / log2(rank + 1)` inside the cutoff.
pub fn metric_ndcg(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1);
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn metric_mrr(rank: usize, n: usize) -> f64 {
    debug_assert!(rank >= 1);
    if rank <= n {
        1.0 / rank as f64
    } else {
        0.0
    }
}

/// 1-based position of `target` under descending score with ascending-index
/// tie-breaking, without sorting the list.
pub fn target_rank(scored: &[(u32, f64)], target: u32) -> usize {
    let ts = scored
        .iter()
        .find(|(c, _)| *c == target)
        .map(|(_, s)| *s)
        .expect("target must be among the candidates");
    1 + scored
        .iter()
        .filter(|(c, s)| *s > ts || (*s == ts && *c < target))
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub user: u32,
    pub query: u32,
    pub target: u32,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct Metrics {
    pub hr_10: f64,
    pub ndcg_10: f64,
    pub ndcg_20: f64,
    pub ndcg_100: f64,
    pub mrr_100: f64,
}

impl Metrics {
    pub fn for_rank(rank: usize) -> Self {
        Self {
            hr_10: metric_hr(rank, 10),
            ndcg_10: metric_ndcg(rank, 10),
            ndcg_20: metric_ndcg(rank, 20),
            ndcg_100: metric_ndcg(rank, 100),
            mrr_100: metric_mrr(rank, 100),
        }
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("HR@10", self.hr_10),
            ("NDCG@10", self.ndcg_10),
            ("NDCG@20", self.ndcg_20),
            ("NDCG@100", self.ndcg_100),
            ("MRR@100", self.mrr_100),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub n_cases: usize,
    pub fingerprint: String,
    #[serde(skip)]
    pub cases: Vec<CaseResult>,
}

impl EvalReport {
    /// Aggregate per-case ranks into unweighted means.
    pub fn from_cases(cases: Vec<CaseResult>, fingerprint: impl Into<String>) -> Self {
        let per: Vec<Metrics> = cases.iter().map(|c| Metrics::for_rank(c.rank)).collect();
        let n = per.len();
        let mean = |f: fn(&Metrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                compensated_sum(per.iter().map(f)) / n as f64
            }
        };
        Self {
            metrics: Metrics {
                hr_10: mean(|m| m.hr_10),
                ndcg_10: mean(|m| m.ndcg_10),
                ndcg_20: mean(|m| m.ndcg_20),
                ndcg_100: mean(|m| m.ndcg_100),
                mrr_100: mean(|m| m.mrr_100),
            },
            n_cases: n,
            fingerprint: fingerprint.into(),
            cases,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>8}", "metric", "value");
        for (name, v) in self.metrics.named() {
            let _ = writeln!(s, "{name:<10} {v:>8.4}");
        }
        let _ = writeln!(s, "{:<10} {:>8}", "cases", self.n_cases);
        s
    }

    /// `user_id,query_id,target,rank` with ids resolved by the callers' tables.
    pub fn to_case_csv(
        &self,
        user_id: impl Fn(u32) -> String,
        product_id: impl Fn(u32) -> String,
    ) -> String {
        let mut s = String::from("user_id,query_id,target,rank\n");
        for c in &self.cases {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                user_id(c.user),
                c.query,
                product_id(c.target),
                c.rank
            );
        }
        s
    }
}

/// Evaluate with an arbitrary rank oracle; cases are processed in parallel
/// but collected in input order.
pub fn evaluate_with<F>(cases: &[EvalCase], fingerprint: &str, rank_of: F) -> EvalReport
where
    F: Fn(&EvalCase) -> usize + Sync,
{
    let results: Vec<CaseResult> = cases
        .par_iter()
        .map(|c| CaseResult {
            user: c.user,
            query: c.query,
            target: c.target,
            rank: rank_of(c),
        })
        .collect();
    EvalReport::from_cases(results, fingerprint)
}

/// Rank every case's candidates with the model and aggregate the metrics.
/// `enriched` holds the graph-enriched node rows (product rows first).
pub fn evaluate(
    params: &ModelParams,
    enriched: &Matrix,
    queries: &[Query],
    cases: &[EvalCase],
    fingerprint: &str,
) -> Result<EvalReport> {
    let mut prepared = BTreeMap::new();
    for c in cases {
        let n_products = params.n_products() as u32;
        if let Some(p) = c.candidates.iter().chain(&c.history).find(|&&p| p >= n_products) {
            return Err(Error::InvalidArgument(format!("product index {p} out of range")));
        }
        if prepared.contains_key(&c.query) {
            continue;
        }
        let query = queries
            .get(c.query as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown query id {}", c.query)))?;
        let q = params.encode_query(&query.token_indices)?;
        let att = params.query_attention(&q);
        prepared.insert(c.query, (q, att));
    }
    let d = params.dim;
    let n_products = params.n_products();
    let cosine = params.score_fn == ScoreFn::Cosine;
    let mut products = params.tensors.product_embeddings.clone();
    if cosine {
        for i in 0..n_products {
            normalize(products.row_mut(i));
        }
    }
    // column i of `pt` is product i
    let pt = DMatrix::from_column_slice(d, n_products, products.as_slice());

    let mut results = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(SCORE_BLOCK) {
        let mixed: Vec<Vec<f64>> = chunk
            .par_iter()
            .map(|c| {
                let (q, att) = &prepared[&c.query];
                let u = params.user_vector_with(enriched, &c.history, att);
                let mut m = params.mix(&u.vector, q);
                if cosine {
                    normalize(&mut m);
                }
                m
            })
            .collect();
        let flat: Vec<f64> = mixed.concat();
        let scores = DMatrix::from_row_slice(chunk.len(), d, &flat) * &pt;
        let ranked: Vec<CaseResult> = chunk
            .par_iter()
            .enumerate()
            .map(|(r, c)| {
                let scored: Vec<(u32, f64)> = c
                    .candidates
                    .iter()
                    .map(|&p| (p, scores[(r, p as usize)]))
                    .collect();
                CaseResult {
                    user: c.user,
                    query: c.query,
                    target: c.target,
                    rank: target_rank(&scored, c.target),
                }
            })
            .collect();
        results.extend(ranked);
    }
    Ok(EvalReport::from_cases(results, fingerprint))
}

/// Cases scored per matrix product in `evaluate`.
const SCORE_BLOCK: usize = 512;

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{segment_sequences, split, Event};
    use crate::model::sort_ranked;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hr_boundaries() {
        assert_eq!(metric_hr(1, 10), 1.0);
        assert_eq!(metric_hr(10, 10), 1.0);
        assert_eq!(metric_hr(11, 10), 0.0);
    }

    #[test]
    fn ndcg_values() {
        assert_eq!(metric_ndcg(1, 10), 1.0);
        assert_eq!(metric_ndcg(3, 10), 0.5);
        assert_eq!(metric_ndcg(15, 10), 0.0);
    }

    #[test]
    fn mrr_values() {
        assert_eq!(metric_mrr(1, 100), 1.0);
        assert_eq!(metric_mrr(4, 100), 0.25);
        assert_eq!(metric_mrr(101, 100), 0.0);
    }

    #[test]
    fn target_rank_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let scored: Vec<(u32, f64)> = (0..50)
                .map(|i| (i, f64::from(rng.random_range(0..10u8))))
                .collect();
            let target = rng.random_range(0..50u32);
            let sorted = sort_ranked(scored.clone());
            let pos = sorted.iter().position(|(c, _)| *c == target).unwrap() + 1;
            assert_eq!(target_rank(&scored, target), pos);
        }
    }

    fn toy_split(n_products: u32) -> DatasetSplit {
        let mut events = Vec::new();
        for p in 0..n_products {
            events.push(Event {
                user: p,
                product: p,
                timestamp: 0,
                query: Some(0),
            });
            events.push(Event {
                user: p,
                product: (p + 1) % n_products,
                timestamp: 1_000_000,
                query: Some(0),
            });
        }
        let seqs = segment_sequences(&events, 10).unwrap();
        split(&seqs).unwrap()
    }

    #[test]
    fn pools_contain_target_once() {
        let sp = toy_split(1200);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cases = build_cases(&sp.test, &sp, 20, 1000, &mut rng).unwrap();
        assert_eq!(cases.len(), 1200);
        for c in cases.iter().take(50) {
            assert_eq!(c.candidates.len(), 1000);
            assert_eq!(c.candidates.iter().filter(|&&x| x == c.target).count(), 1);
            let uniq: HashSet<u32> = c.candidates.iter().copied().collect();
            assert_eq!(uniq.len(), 1000);
        }
    }

    #[test]
    fn pool_capped_by_universe() {
        let sp = toy_split(500);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cases = build_cases(&sp.test, &sp, 20, 1000, &mut rng).unwrap();
        assert!(cases.iter().all(|c| c.candidates.len() == 500));
    }

    #[test]
    fn pools_are_seed_deterministic() {
        let sp = toy_split(300);
        let a = build_cases(&sp.test, &sp, 20, 100, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = build_cases(&sp.test, &sp, 20, 100, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn report_means_and_bounds() {
        let ranks = [1usize, 2, 3, 11, 150];
        let cases: Vec<CaseResult> = ranks
            .iter()
            .map(|&r| CaseResult {
                user: 0,
                query: 0,
                target: 0,
                rank: r,
            })
            .collect();
        let rep = EvalReport::from_cases(cases, "fp");
        assert_eq!(rep.metrics.hr_10, 3.0 / 5.0);
        let ndcg10 = (1.0 + 1.0 / 3f64.log2() + 0.5) / 5.0;
        assert!((rep.metrics.ndcg_10 - ndcg10).abs() < 1e-15);
        let mrr = (1.0 + 0.5 + 1.0 / 3.0 + 1.0 / 11.0) / 5.0;
        assert!((rep.metrics.mrr_100 - mrr).abs() < 1e-15);
        assert!(rep.to_json().contains("\"ndcg_10\""));
        assert!(rep.to_table().contains("NDCG@10"));
        let csv = rep.to_case_csv(|u| format!("u{u}"), |p| format!("p{p}"));
        assert!(csv.starts_with("user_id,query_id,target,rank\nu0,0,p0,1\n"));
    }
}
