//! The prepared corpus: ingest -> vocabulary -> queries -> segmentation ->
//! split, plus its line-oriented on-disk layout.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::{
    build_vocabulary, extract_queries, segment_sequences, split, tokenize, DatasetSplit, Event,
    IdIndex, Interaction, Query, ReviewRecord, SplitPart, SuccessiveSequence, Vocabulary,
};
use crate::error::{Error, Result};
use crate::evaluation::{build_cases, EvalCase};
use crate::graph::{build_graph, BehaviorGraph};
use crate::seed::rng_for;
use crate::training::{training_triples, TrainingData};

pub const VOCAB_FILE: &str = "vocab.tsv";
pub const QUERIES_FILE: &str = "queries.tsv";
pub const PRODUCTS_FILE: &str = "products.tsv";
pub const SEQUENCES_FILE: &str = "sequences.tsv";
pub const SPLIT_FILE: &str = "split.tsv";
pub const GRAPH_FILE: &str = "graph.tsv";
pub const STATS_FILE: &str = "stats.txt";
pub const META_FILE: &str = "meta.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrepareConfig {
    pub min_count: usize,
    /// Successive-behavior interval R in seconds.
    pub interval: u64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            min_count: 5,
            interval: 7 * 86_400,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCorpus {
    pub config: PrepareConfig,
    pub users: IdIndex,
    pub products: IdIndex,
    pub vocab: Vocabulary,
    pub queries: Vec<Query>,
    pub product_queries: Vec<Vec<u32>>,
    /// Words of each product's training reviews, with multiplicity.
    pub product_words: Vec<Vec<u32>>,
    pub sequences: Vec<SuccessiveSequence>,
    pub split: DatasetSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusStats {
    pub users: usize,
    pub products: usize,
    pub queries: usize,
    pub reviews: usize,
    pub words: usize,
    pub sequences: usize,
    pub train_sequences: usize,
    pub edges: usize,
    pub dropped_targets: usize,
}

impl CorpusStats {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "users={}", self.users);
        let _ = writeln!(s, "products={}", self.products);
        let _ = writeln!(s, "queries={}", self.queries);
        let _ = writeln!(s, "reviews={}", self.reviews);
        let _ = writeln!(s, "words={}", self.words);
        let _ = writeln!(s, "sequences={}", self.sequences);
        let _ = writeln!(s, "train_sequences={}", self.train_sequences);
        let _ = writeln!(s, "edges={}", self.edges);
        let _ = writeln!(s, "dropped_eval_targets={}", self.dropped_targets);
        s
    }
}

/// Run the preparation pipeline over ingested records.
pub fn prepare(records: &[ReviewRecord], config: PrepareConfig) -> Result<PreparedCorpus> {
    let vocab = build_vocabulary(records, config.min_count)?;
    let users = IdIndex::from_ids(records.iter().map(|r| r.user_id.as_str()));
    let products = IdIndex::from_ids(records.iter().map(|r| r.product_id.as_str()));
    let qs = extract_queries(records, &vocab, &products);
    let events: Vec<Event> = records
        .iter()
        .map(|r| Event {
            user: users.get(&r.user_id).expect("indexed"),
            product: products.get(&r.product_id).expect("indexed"),
            timestamp: r.timestamp,
            query: qs.query_for_path(&r.category_path),
        })
        .collect();
    let sequences = segment_sequences(&events, config.interval)?;
    let split = split(&sequences)?;

    let train_keys: HashSet<(u32, u32, u64)> = split
        .train
        .iter()
        .flat_map(|s| s.interactions.iter().map(move |i| (s.user, i.product, i.timestamp)))
        .collect();
    let mut product_words = vec![Vec::new(); products.len()];
    for (r, e) in records.iter().zip(&events) {
        if train_keys.contains(&(e.user, e.product, e.timestamp)) {
            product_words[e.product as usize]
                .extend(tokenize(&r.review_text).iter().filter_map(|t| vocab.get(t)));
        }
    }

    Ok(PreparedCorpus {
        config,
        users,
        products,
        vocab,
        queries: qs.queries,
        product_queries: qs.product_queries,
        product_words,
        sequences,
        split,
    })
}

impl PreparedCorpus {
    pub fn graph(&self) -> Result<BehaviorGraph> {
        build_graph(&self.split.train, self.products.len())
    }

    pub fn stats(&self, graph: &BehaviorGraph, n_reviews: usize) -> CorpusStats {
        CorpusStats {
            users: self.users.len(),
            products: self.products.len(),
            queries: self.queries.len(),
            reviews: n_reviews,
            words: self.vocab.len(),
            sequences: self.sequences.len(),
            train_sequences: self.split.train.len(),
            edges: graph.n_edges(),
            dropped_targets: self.split.dropped_targets,
        }
    }

    pub fn validation_cases(&self, seed: u64, history_cap: usize, pool_size: usize) -> Result<Vec<EvalCase>> {
        build_cases(
            &self.split.validation,
            &self.split,
            history_cap,
            pool_size,
            &mut rng_for(seed, "validation-cases"),
        )
    }

    pub fn test_cases(&self, seed: u64, history_cap: usize, pool_size: usize) -> Result<Vec<EvalCase>> {
        build_cases(
            &self.split.test,
            &self.split,
            history_cap,
            pool_size,
            &mut rng_for(seed, "test-cases"),
        )
    }

    pub fn training_data(&self, seed: u64, history_cap: usize, pool_size: usize) -> Result<TrainingData> {
        Ok(TrainingData {
            n_words: self.vocab.len(),
            n_products: self.products.len(),
            queries: self.queries.clone(),
            product_words: self.product_words.clone(),
            word_frequencies: self.vocab.frequencies().to_vec(),
            train_products: self.split.train_products.clone(),
            triples: training_triples(&self.split, history_cap),
            validation_cases: self.validation_cases(seed, history_cap, pool_size)?,
        })
    }

    /// Write the prepared corpus and its graph under `dir`.
    pub fn save(&self, dir: &Path, graph: &BehaviorGraph, n_reviews: usize) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };

        let mut meta = String::new();
        let _ = writeln!(meta, "min_count={}", self.config.min_count);
        let _ = writeln!(meta, "interval_seconds={}", self.config.interval);
        let _ = writeln!(meta, "n_users={}", self.users.len());
        write(META_FILE, meta)?;

        let mut vocab = String::new();
        for (t, f) in self.vocab.tokens().iter().zip(self.vocab.frequencies()) {
            let _ = writeln!(vocab, "{t}\t{f}");
        }
        write(VOCAB_FILE, vocab)?;

        let mut queries = String::new();
        for q in &self.queries {
            let toks: Vec<String> = q.token_indices.iter().map(u32::to_string).collect();
            let _ = writeln!(queries, "{}\t{}\t{}", q.query_id, q.source_category, toks.join(" "));
        }
        write(QUERIES_FILE, queries)?;

        let mut products = String::new();
        for (i, id) in self.products.ids().iter().enumerate() {
            let qs: Vec<String> = self.product_queries[i].iter().map(u32::to_string).collect();
            let ws: Vec<String> = self.product_words[i].iter().map(u32::to_string).collect();
            let _ = writeln!(products, "{i}\t{id}\t{}\t{}", qs.join(","), ws.join(" "));
        }
        write(PRODUCTS_FILE, products)?;

        let mut seqs = String::new();
        for s in &self.sequences {
            let items: Vec<String> = s
                .interactions
                .iter()
                .map(|i| match i.query {
                    Some(q) => format!("{}:{}:{}", i.product, i.timestamp, q),
                    None => format!("{}:{}:-", i.product, i.timestamp),
                })
                .collect();
            let _ = writeln!(seqs, "{}\t{}\t{}", s.seq_id, self.users.id(s.user), items.join(","));
        }
        write(SEQUENCES_FILE, seqs)?;

        let mut manifest = String::new();
        for (id, part) in self.split.assignments() {
            let _ = writeln!(manifest, "{id}\t{}", part.as_str());
        }
        write(SPLIT_FILE, manifest)?;

        write(GRAPH_FILE, graph.to_edge_list())?;
        write(STATS_FILE, self.stats(graph, n_reviews).render())
    }

    /// Load a prepared corpus written by [`PreparedCorpus::save`]. The split is
    /// recomputed from the sequences and checked against the manifest.
    pub fn load(dir: &Path) -> Result<(Self, BehaviorGraph)> {
        let read = |name: &str| -> Result<String> {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let bad = |file: &str, line: usize| Error::Parse(format!("{file}: malformed line {line}"));

        let meta = read(META_FILE)?;
        let mut min_count = None;
        let mut interval = None;
        for line in meta.lines() {
            if let Some((k, v)) = line.split_once('=') {
                match k {
                    "min_count" => min_count = v.parse().ok(),
                    "interval_seconds" => interval = v.parse().ok(),
                    _ => {}
                }
            }
        }
        let config = PrepareConfig {
            min_count: min_count.ok_or_else(|| bad(META_FILE, 1))?,
            interval: interval.ok_or_else(|| bad(META_FILE, 2))?,
        };

        let mut entries = Vec::new();
        for (i, line) in read(VOCAB_FILE)?.lines().enumerate() {
            let (t, f) = line.split_once('\t').ok_or_else(|| bad(VOCAB_FILE, i + 1))?;
            entries.push((t.to_string(), f.parse().map_err(|_| bad(VOCAB_FILE, i + 1))?));
        }
        let vocab = Vocabulary::from_entries(entries)?;

        let mut queries = Vec::new();
        for (i, line) in read(QUERIES_FILE)?.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad(QUERIES_FILE, i + 1));
            }
            let token_indices = f[2]
                .split_whitespace()
                .map(|t| t.parse::<u32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(QUERIES_FILE, i + 1))?;
            if token_indices.is_empty() || token_indices.iter().any(|&t| t as usize >= vocab.len()) {
                return Err(bad(QUERIES_FILE, i + 1));
            }
            queries.push(Query {
                query_id: f[0].parse().map_err(|_| bad(QUERIES_FILE, i + 1))?,
                token_indices,
                source_category: f[1].to_string(),
            });
        }

        let mut product_ids = Vec::new();
        let mut product_queries = Vec::new();
        let mut product_words = Vec::new();
        for (i, line) in read(PRODUCTS_FILE)?.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad(PRODUCTS_FILE, i + 1));
            }
            product_ids.push(f[1].to_string());
            let parse_list = |s: &str, sep: char| -> Result<Vec<u32>> {
                s.split(sep)
                    .filter(|t| !t.is_empty())
                    .map(|t| t.parse::<u32>().map_err(|_| bad(PRODUCTS_FILE, i + 1)))
                    .collect()
            };
            product_queries.push(parse_list(f[2], ',')?);
            product_words.push(parse_list(f[3], ' ')?);
        }
        let products = IdIndex::from_ordered(product_ids)?;

        let mut user_ids = Vec::new();
        let mut raw_seqs = Vec::new();
        for (i, line) in read(SEQUENCES_FILE)?.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad(SEQUENCES_FILE, i + 1));
            }
            let seq_id: u32 = f[0].parse().map_err(|_| bad(SEQUENCES_FILE, i + 1))?;
            let mut interactions = Vec::new();
            for item in f[2].split(',').filter(|s| !s.is_empty()) {
                let parts: Vec<&str> = item.split(':').collect();
                if parts.len() != 3 {
                    return Err(bad(SEQUENCES_FILE, i + 1));
                }
                interactions.push(Interaction {
                    product: parts[0].parse().map_err(|_| bad(SEQUENCES_FILE, i + 1))?,
                    timestamp: parts[1].parse().map_err(|_| bad(SEQUENCES_FILE, i + 1))?,
                    query: match parts[2] {
                        "-" => None,
                        q => Some(q.parse().map_err(|_| bad(SEQUENCES_FILE, i + 1))?),
                    },
                });
            }
            user_ids.push(f[1].to_string());
            raw_seqs.push((seq_id, f[1].to_string(), interactions));
        }
        let users = IdIndex::from_ids(user_ids.iter().map(String::as_str));
        let sequences: Vec<SuccessiveSequence> = raw_seqs
            .into_iter()
            .map(|(seq_id, user, interactions)| SuccessiveSequence {
                seq_id,
                user: users.get(&user).expect("indexed"),
                start_time: interactions.first().map_or(0, |i| i.timestamp),
                end_time: interactions.last().map_or(0, |i| i.timestamp),
                interactions,
            })
            .collect();

        let split = split(&sequences)?;
        let mut manifest = Vec::new();
        for (i, line) in read(SPLIT_FILE)?.lines().enumerate() {
            let (id, part) = line.split_once('\t').ok_or_else(|| bad(SPLIT_FILE, i + 1))?;
            manifest.push((
                id.parse::<u32>().map_err(|_| bad(SPLIT_FILE, i + 1))?,
                SplitPart::parse(part).ok_or_else(|| bad(SPLIT_FILE, i + 1))?,
            ));
        }
        if manifest != split.assignments() {
            return Err(Error::Parse("split manifest disagrees with sequences".into()));
        }

        let graph = BehaviorGraph::load(&dir.join(GRAPH_FILE))?;
        if graph != build_graph(&split.train, products.len())? {
            return Err(Error::Parse("graph file disagrees with training sequences".into()));
        }

        Ok((
            Self {
                config,
                users,
                products,
                vocab,
                queries,
                product_queries,
                product_words,
                sequences,
                split,
            },
            graph,
        ))
    }
}
