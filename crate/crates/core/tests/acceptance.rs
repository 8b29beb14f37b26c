//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion (written straight to stdout so it shows without `--nocapture`).
//!
//! The planted-signal experiments train 18 models; expect ~30 minutes on a
//! single core.

mod common;

use std::io::Write as _;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use common::{random_bipartite, random_matrix, rng, toy_instance};
use rand::Rng;

use sbg_core::checkpoint;
use sbg_core::corpus::{ingest, k_core_filter, InputFormat};
use sbg_core::dataset::{prepare, PrepareConfig};
use sbg_core::evaluation::{evaluate, evaluate_with, target_rank, EvalCase, EvalReport};
use sbg_core::graph::{
    closed_form_propagate, diversity, jumping_propagate, spectral_diagnostics, verify_theorem1, BehaviorGraph,
    PropagationConfig,
};
use sbg_core::model::ScoreFn;
use sbg_core::synthetic::{generate, SyntheticConfig};
use sbg_core::training::{check_gradients, train, TrainConfig};

fn report(id: u32, pass: bool, detail: &str) {
    let line = format!(
        "acceptance criterion {id}: {} - {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn finish(id: u32, pass: bool, detail: String) {
    report(id, pass, &detail);
    assert!(pass, "criterion {id}: {detail}");
}

/// Heavy criteria run one at a time so their wall-clock numbers mean something.
static HEAVY: Mutex<()> = Mutex::new(());

fn heavy() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

// ---------------------------------------------------------------- graph grid

const OMEGAS: [f64; 3] = [0.55, 0.7, 0.9];
const BETAS: [f64; 3] = [0.1, 0.5, 0.9];
const LAYERS: [usize; 6] = [1, 2, 4, 8, 16, 64];
const N_GRAPHS: usize = 100;

struct GridGraph {
    graph: BehaviorGraph,
    h0: sbg_core::matrix::Matrix,
}

fn grid_graphs() -> Vec<GridGraph> {
    let mut r = rng(2024);
    let mut out = Vec::new();
    while out.len() < N_GRAPHS {
        let np = r.random_range(2..=100);
        let ns = r.random_range(2..=100);
        let p = r.random_range(0.05..0.5);
        let graph = random_bipartite(np, ns, p, &mut r);
        let h0 = random_matrix(graph.n_nodes(), 4, &mut r);
        if diversity(&graph, &h0) > 0.0 {
            out.push(GridGraph { graph, h0 });
        }
    }
    out
}

#[test]
fn criterion_1_jumping_preserves_diversity() {
    let _g = heavy();
    let started = Instant::now();
    let graphs = grid_graphs();
    let mut instances = 0usize;
    let mut violations_l1 = 0usize;
    let mut violations_deeper = 0usize;
    let mut worst_l1_gap = 0.0f64;
    let mut connected = 0usize;
    let mut limit_failures = 0usize;
    let mut decay_failures = 0usize;
    for gg in &graphs {
        let is_connected = gg.graph.is_connected();
        connected += usize::from(is_connected);
        for &omega in &OMEGAS {
            for &beta in &BETAS {
                let rep = verify_theorem1(&gg.graph, &gg.h0, omega, beta, 200).unwrap();
                for &l in &LAYERS {
                    instances += 1;
                    let e = &rep.layers[l - 1];
                    if !(e.with_jump > e.plain) {
                        if l == 1 {
                            violations_l1 += 1;
                            worst_l1_gap = worst_l1_gap.max((e.with_jump - e.plain).abs() / e.plain.max(1e-300));
                        } else {
                            violations_deeper += 1;
                        }
                    }
                }
                if is_connected {
                    let spectrum = spectral_diagnostics(&gg.graph, omega, beta, 200).unwrap();
                    let limit = spectrum.jump_diversity_limit(&gg.h0);
                    let last = rep.layers.last().unwrap();
                    if !(last.with_jump >= 0.5 * limit) {
                        limit_failures += 1;
                    }
                    if !(last.plain <= 1e-3 * rep.initial) {
                        decay_failures += 1;
                    }
                }
            }
        }
    }
    let elapsed = started.elapsed();
    let pass = violations_l1 + violations_deeper == 0
        && limit_failures == 0
        && decay_failures == 0
        && elapsed < Duration::from_secs(60);
    finish(
        1,
        pass,
        format!(
            "{instances} instances over {} graphs ({connected} connected): strict-inequality violations \
             l=1: {violations_l1} (max relative gap {worst_l1_gap:.1e}; one layer of either recursion is F*H0, \
             so the two sides are equal up to rounding), l>=2: {violations_deeper}; \
             limit check failures {limit_failures}; plain-decay failures {decay_failures}; {:.1}s",
            graphs.len(),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_2_closed_form_equivalence() {
    let _g = heavy();
    let started = Instant::now();
    let graphs = grid_graphs();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for gg in &graphs {
        for &omega in &OMEGAS {
            for &beta in &BETAS {
                for &layers in &LAYERS {
                    let cfg = PropagationConfig { omega, beta, layers };
                    let rec = jumping_propagate(&gg.graph, &gg.h0, &cfg).unwrap().matrix;
                    let closed = closed_form_propagate(&gg.graph, &gg.h0, &cfg).unwrap();
                    worst = worst.max(rec.max_abs_diff(&closed));
                    checked += 1;
                }
            }
        }
    }
    let elapsed = started.elapsed();
    finish(
        2,
        worst <= 1e-6 && elapsed < Duration::from_secs(30),
        format!(
            "{checked} configurations, max |recursive - closed form| = {worst:.2e} (tol 1e-6), {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_3_gradient_oracle() {
    let _g = heavy();
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut runs = 0;
    for (seed, dim, score_fn, layers) in [
        (31, 4, ScoreFn::Dot, 0),
        (32, 4, ScoreFn::Dot, 1),
        (33, 6, ScoreFn::Dot, 2),
        (34, 8, ScoreFn::Dot, 4),
        (35, 4, ScoreFn::Cosine, 0),
        (36, 6, ScoreFn::Cosine, 3),
        (37, 8, ScoreFn::Cosine, 4),
    ] {
        let toy = toy_instance(seed, dim, score_fn);
        let cfg = PropagationConfig { omega: 0.3, beta: 0.2, layers };
        for c in check_gradients(&toy.params, &toy.graph, &cfg, &toy.queries, &toy.batch, 1e-4).unwrap() {
            if c.relative_error > worst {
                worst = c.relative_error;
                worst_at = format!("{} (d={dim}, {score_fn}, L={layers})", c.tensor);
            }
        }
        runs += 1;
    }
    let elapsed = started.elapsed();
    finish(
        3,
        worst <= 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "{runs} toy instances x 7 tensors, worst relative error {worst:.2e} at {worst_at} (tol 1e-4), {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_4_metric_oracle() {
    let mut r = rng(404);
    // 200 cases with tie-prone scores against a full-sort recomputation
    let mut cases = Vec::new();
    let mut scores: Vec<Vec<f64>> = Vec::new();
    for i in 0..200u32 {
        let pool: Vec<u32> = (0..300).collect();
        let target = r.random_range(0..300);
        let mut cands = vec![target];
        cands.extend(pool.iter().copied().filter(|&p| p != target));
        cases.push(EvalCase { user: i, query: 0, target, candidates: cands, history: Vec::new() });
        scores.push((0..300).map(|_| r.random_range(0..60) as f64).collect());
    }
    let rep = evaluate_with(&cases, "oracle", |c| {
        let s = &scores[c.user as usize];
        target_rank(&c.candidates.iter().map(|&p| (p, s[p as usize])).collect::<Vec<_>>(), c.target)
    });
    let brute: Vec<usize> = cases
        .iter()
        .map(|c| {
            let s = &scores[c.user as usize];
            let mut v: Vec<(u32, f64)> = c.candidates.iter().map(|&p| (p, s[p as usize])).collect();
            v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            1 + v.iter().position(|(p, _)| *p == c.target).unwrap()
        })
        .collect();
    let oracle = EvalReport::from_cases(
        rep.cases
            .iter()
            .zip(&brute)
            .map(|(c, &rank)| sbg_core::evaluation::CaseResult { rank, ..c.clone() })
            .collect(),
        "oracle",
    );
    let naive_ndcg10: f64 = brute
        .iter()
        .map(|&k| if k <= 10 { 1.0 / ((k + 1) as f64).log2() } else { 0.0 })
        .sum::<f64>()
        / 200.0;
    let exact = rep.metrics == oracle.metrics
        && rep.cases.iter().map(|c| c.rank).eq(brute.iter().copied())
        && (rep.metrics.ndcg_10 - naive_ndcg10).abs() <= 1e-15;

    // random scorer on 1000-pools
    let random_cases: Vec<EvalCase> = (0..10_000u32)
        .map(|i| EvalCase { user: i, query: 0, target: 0, candidates: (0..1000).collect(), history: Vec::new() })
        .collect();
    let rand_scores: Vec<Vec<f64>> =
        (0..10_000).map(|_| (0..1000).map(|_| r.random::<f64>()).collect()).collect();
    let random = evaluate_with(&random_cases, "random", |c| {
        let s = &rand_scores[c.user as usize];
        target_rank(&c.candidates.iter().map(|&p| (p, s[p as usize])).collect::<Vec<_>>(), c.target)
    });
    let hr = random.metrics.hr_10;
    finish(
        4,
        exact && (hr - 0.010).abs() <= 0.005,
        format!("200-case aggregates match brute force exactly: {exact}; random-scorer HR@10 = {hr:.4} over 10000 cases (0.010 +/- 0.005)"),
    );
}

// ------------------------------------------------------- planted experiments

const SEEDS: [u64; 3] = [1, 2, 3];
const PLANTED_EPOCHS: usize = 100;

struct PlantedCorpus {
    data: sbg_core::training::TrainingData,
    graph: BehaviorGraph,
    test: Vec<EvalCase>,
}

fn planted_corpus(seed: u64) -> PlantedCorpus {
    let records = generate(&SyntheticConfig { seed, ..SyntheticConfig::default() }).unwrap();
    let prepared = prepare(&records, PrepareConfig::default()).unwrap();
    let graph = prepared.graph().unwrap();
    let defaults = TrainConfig::default();
    PlantedCorpus {
        data: prepared.training_data(seed, defaults.history_cap, 1000).unwrap(),
        test: prepared.test_cases(seed, defaults.history_cap, 1000).unwrap(),
        graph,
    }
}

/// Test NDCG@10 after a fixed epoch budget with best-validation selection.
fn planted_run(corpus: &PlantedCorpus, seed: u64, layers: usize, beta: f64) -> f64 {
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        seed,
        epochs: PLANTED_EPOCHS,
        patience: PLANTED_EPOCHS,
        propagation: PropagationConfig { layers, beta, ..defaults.propagation },
        ..defaults
    };
    let out = train(&corpus.data, &corpus.graph, &config).unwrap();
    assert!(out.aborted.is_none(), "training diverged: {:?}", out.aborted);
    let enriched = jumping_propagate(&corpus.graph, &out.best.initial_node_features(), &config.propagation).unwrap();
    evaluate(&out.best, &enriched.matrix, &corpus.data.queries, &corpus.test, "planted")
        .unwrap()
        .metrics
        .ndcg_10
}

struct ShallowRuns {
    l0: Vec<f64>,
    l4: Vec<f64>,
    elapsed: Duration,
}

fn shallow_runs() -> &'static ShallowRuns {
    static RUNS: OnceLock<ShallowRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let _g = heavy();
        let started = Instant::now();
        let mut l0 = Vec::new();
        let mut l4 = Vec::new();
        for seed in SEEDS {
            let corpus = planted_corpus(seed);
            l0.push(planted_run(&corpus, seed, 0, 0.1));
            l4.push(planted_run(&corpus, seed, 4, 0.1));
        }
        ShallowRuns { l0, l4, elapsed: started.elapsed() }
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/")
}

#[test]
fn criterion_5_planted_signal_beats_no_graph_ablation() {
    let runs = shallow_runs();
    let (a, b) = (mean(&runs.l4), mean(&runs.l0));
    let gain = (a - b) / b;
    finish(
        5,
        gain >= 0.10 && runs.elapsed < Duration::from_secs(600),
        format!(
            "test NDCG@10 mean over seeds {SEEDS:?}: L=4 {a:.4} ({}) vs L=0 {b:.4} ({}), relative gain {:+.1}% (need >= +10%), {:.0}s",
            fmt(&runs.l4),
            fmt(&runs.l0),
            100.0 * gain,
            runs.elapsed.as_secs_f64()
        ),
    );
}

#[test]
#[ignore = "needs the Magazine review corpus: set SBG_MAGAZINE_PATH to a TSV/JSONL export"]
fn criterion_6_real_data_directional_check() {
    let Ok(path) = std::env::var("SBG_MAGAZINE_PATH") else {
        report(6, false, "NOT RUN: SBG_MAGAZINE_PATH is unset");
        panic!("SBG_MAGAZINE_PATH is unset");
    };
    let _g = heavy();
    let started = Instant::now();
    let path = std::path::PathBuf::from(path);
    let raw = ingest(&path, InputFormat::from_path(&path), 100).unwrap().records;
    let k = std::env::var("SBG_MAGAZINE_K_CORE").ok().and_then(|v| v.parse().ok()).unwrap_or(0);
    let records = k_core_filter(&raw, k);
    let prepared = prepare(&records, PrepareConfig::default()).unwrap();
    let graph = prepared.graph().unwrap();
    let stats = prepared.stats(&graph, records.len());
    let reference = [("users", 694, stats.users), ("products", 876, stats.products), ("queries", 170, stats.queries), ("sequences", 2337, stats.sequences), ("edges", 3078, stats.edges)];
    let within = reference
        .iter()
        .all(|(_, p, ours)| (*ours as f64) <= 2.0 * *p as f64 && (*ours as f64) >= *p as f64 / 2.0);
    let defaults = TrainConfig::default();
    let data = prepared.training_data(defaults.seed, defaults.history_cap, 1000).unwrap();
    let test = prepared.test_cases(defaults.seed, defaults.history_cap, 1000).unwrap();
    let run = |layers: usize| {
        let config = TrainConfig {
            propagation: PropagationConfig { layers, ..defaults.propagation },
            ..defaults.clone()
        };
        let out = train(&data, &graph, &config).unwrap();
        let enriched = jumping_propagate(&graph, &out.best.initial_node_features(), &config.propagation).unwrap();
        evaluate(&out.best, &enriched.matrix, &data.queries, &test, "magazine").unwrap().metrics.ndcg_10
    };
    let sbg = run(defaults.propagation.layers);
    let zam = run(0);
    let counts: Vec<String> = reference.iter().map(|(n, p, o)| format!("{n} {o} (reference {p})")).collect();
    finish(
        6,
        sbg > zam && within,
        format!(
            "NDCG@10 SBG {sbg:.4} vs L=0 {zam:.4}; stats within 2x of reference: {within} [{}]; {:.0}s",
            counts.join(", "),
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_7_layer_depth_ablation_shape() {
    let shallow = shallow_runs();
    let (deep_jump, deep_plain, elapsed) = {
        let _g = heavy();
        let started = Instant::now();
        let mut wj = Vec::new();
        let mut oj = Vec::new();
        for seed in SEEDS {
            let corpus = planted_corpus(seed);
            wj.push(planted_run(&corpus, seed, 64, 0.1));
            oj.push(planted_run(&corpus, seed, 64, 0.0));
        }
        (wj, oj, started.elapsed())
    };
    let (l0, l4, wj, oj) = (mean(&shallow.l0), mean(&shallow.l4), mean(&deep_jump), mean(&deep_plain));
    finish(
        7,
        l4 > l0 && l4 > wj && wj >= oj,
        format!(
            "mean test NDCG@10: L=0 {l0:.4}, L=4 {l4:.4}, L=64 with jumping {wj:.4} ({}), L=64 without jumping {oj:.4} ({}); {:.0}s for the deep runs",
            fmt(&deep_jump),
            fmt(&deep_plain),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_8_determinism() {
    let _g = heavy();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run = |dir: &std::path::Path| -> (Vec<u8>, String, String) {
        pool.install(|| {
            let records = generate(&SyntheticConfig { users: 200, products: 120, clusters: 4, seed: 9, ..SyntheticConfig::default() }).unwrap();
            let prepared = prepare(&records, PrepareConfig::default()).unwrap();
            let graph = prepared.graph().unwrap();
            prepared.save(&dir.join("prepared"), &graph, records.len()).unwrap();
            let config = TrainConfig { dim: 16, attn_dim: 4, epochs: 3, batch_size: 128, ..TrainConfig::default() };
            let data = prepared.training_data(config.seed, config.history_cap, 1000).unwrap();
            let out = train(&data, &graph, &config).unwrap();
            checkpoint::save(&out.best, "determinism", &dir.join("ckpt")).unwrap();
            let test = prepared.test_cases(config.seed, config.history_cap, 1000).unwrap();
            let enriched = jumping_propagate(&graph, &out.best.initial_node_features(), &config.propagation).unwrap();
            let rep = evaluate(&out.best, &enriched.matrix, &data.queries, &test, "determinism").unwrap();
            let csv = rep.to_case_csv(
                |u| prepared.users.id(u).to_string(),
                |p| prepared.products.id(p).to_string(),
            );
            (dir_bytes(dir), rep.to_json(), csv)
        })
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run(a.path());
    let rb = run(b.path());
    let same_files = ra.0 == rb.0;
    let same_report = ra.1 == rb.1 && ra.2 == rb.2;
    finish(
        8,
        same_files && same_report && !ra.0.is_empty(),
        format!(
            "two single-threaded prepare+train+eval runs: artifacts identical {same_files} ({} bytes), reports identical {same_report}",
            ra.0.len()
        ),
    );
}

/// Concatenated `relative path + contents` of every file under `dir`, sorted.
fn dir_bytes(dir: &std::path::Path) -> Vec<u8> {
    fn walk(base: &std::path::Path, dir: &std::path::Path, files: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(base, &path, files);
            } else {
                let rel = path.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files);
    files.sort();
    files
        .into_iter()
        .flat_map(|(name, bytes)| name.into_bytes().into_iter().chain(bytes))
        .collect()
}
