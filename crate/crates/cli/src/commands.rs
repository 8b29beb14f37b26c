use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;

use sbg_core::checkpoint;
use sbg_core::corpus::{ingest, k_core_filter, write_records, InputFormat};
use sbg_core::dataset::{prepare, CorpusStats, PreparedCorpus};
use sbg_core::evaluation::evaluate;
use sbg_core::graph::{
    jump_coefficient, jumping_propagate, plain_coefficient, spectral_diagnostics, verify_theorem1, BehaviorGraph,
    PropagationConfig, TheoremStatus,
};
use sbg_core::matrix::Matrix;
use sbg_core::seed::rng_for;
use sbg_core::synthetic::{generate, SyntheticConfig};
use sbg_core::training::{metrics_csv, train, TrainConfig};

use crate::amazon;
use crate::config::RunConfig;
use crate::fail::{Failure, Outcome};
use crate::fetch::{fetch, file_name_for, FetchStatus};

/// Published statistics of the Amazon Magazine Subscriptions corpus, shown
/// next to ours after `prepare`.
pub const MAGAZINE_REFERENCE: [(&str, usize); 5] = [
    ("users", 694),
    ("products", 876),
    ("queries", 170),
    ("sequences", 2337),
    ("edges", 3078),
];

const MODEL_FILE: &str = "model.txt";

fn write(path: &Path, text: impl AsRef<[u8]>) -> Outcome<()> {
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

/// Fresh `<runs_dir>/<config hash>-<unix seconds>[-n]` with the effective
/// config dumped inside.
pub fn create_run_dir(cfg: &RunConfig, command: &str) -> Outcome<PathBuf> {
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let base = format!("{}-{stamp}", cfg.hash());
    let mut dir = cfg.runs_dir.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = cfg.runs_dir.join(format!("{base}-{n}"));
        n += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| Failure::io(&dir, e))?;
    write(&dir.join("config.txt"), format!("# sbg {command}\n{}", cfg.dump()))?;
    Ok(dir)
}

fn load_prepared(cfg: &RunConfig) -> Outcome<(PreparedCorpus, BehaviorGraph)> {
    if !cfg.data.is_dir() {
        return Err(Failure::new(
            "E_IO",
            format!("prepared data directory {} not found; run `sbg prepare` first", cfg.data.display()),
        ));
    }
    Ok(PreparedCorpus::load(&cfg.data)?)
}

pub fn reference_table(stats: &CorpusStats) -> String {
    let ours = |name: &str| match name {
        "users" => stats.users,
        "products" => stats.products,
        "queries" => stats.queries,
        "sequences" => stats.sequences,
        _ => stats.edges,
    };
    let mut s = format!("{:<10} {:>10} {:>12}\n", "stat", "corpus", "magazine");
    for (name, reference) in MAGAZINE_REFERENCE {
        let _ = writeln!(s, "{name:<10} {:>10} {reference:>12}", ours(name));
    }
    let _ = writeln!(s, "{:<10} {:>10}", "reviews", stats.reviews);
    let _ = writeln!(s, "{:<10} {:>10}", "words", stats.words);
    s
}

pub fn cmd_prepare(cfg: &RunConfig) -> Outcome<()> {
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| Failure::new("E_CONFIG", "input is not set; pass --input <records file>"))?;
    let report = ingest(input, cfg.input_format.resolve(input), cfg.max_bad_lines)?;
    if !report.bad_lines.is_empty() {
        eprintln!("skipped {} malformed line(s)", report.bad_lines.len());
    }
    let records = if cfg.k_core > 1 {
        let kept = k_core_filter(&report.records, cfg.k_core);
        eprintln!("{}-core filter kept {} of {} records", cfg.k_core, kept.len(), report.records.len());
        kept
    } else {
        report.records
    };
    let prepared = prepare(&records, cfg.prepare_config())?;
    let graph = prepared.graph()?;
    prepared.save(&cfg.data, &graph, records.len())?;
    let stats = prepared.stats(&graph, records.len());
    let table = reference_table(&stats);
    write(&cfg.data.join("config.txt"), format!("# sbg prepare\n{}", cfg.dump()))?;
    write(&cfg.data.join("stats_reference.txt"), &table)?;
    print!("{table}");
    println!("prepared corpus written to {}", cfg.data.display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Outcome<()> {
    let (corpus, graph) = load_prepared(cfg)?;
    let config = cfg.train_config();
    let data = corpus.training_data(cfg.seed, cfg.history_cap, cfg.pool_size)?;
    let run = create_run_dir(cfg, "train")?;
    eprintln!(
        "training L={} omega={} beta={} on {} triples ({} products, {} sequences)",
        cfg.layers,
        cfg.omega,
        cfg.beta,
        data.triples.len(),
        graph.n_products(),
        graph.n_sequences()
    );
    let out = train(&data, &graph, &config)?;
    write(&run.join("metrics.csv"), metrics_csv(&out.log))?;
    let ckpt = run.join("checkpoint");
    checkpoint::save(&out.best, &cfg.model_fingerprint(&graph.fingerprint()), &ckpt)?;
    write(&ckpt.join(MODEL_FILE), cfg.model_identity(&graph.fingerprint()))?;
    let mut summary = format!("best_epoch={}\nepochs_run={}\n", out.best_epoch, out.log.len());
    if let Some(m) = &out.best_validation {
        for (name, v) in m.named() {
            let _ = writeln!(summary, "validation_{name}={v:.6}");
        }
    }
    if let Some(e) = &out.aborted {
        let _ = writeln!(summary, "aborted={e}");
    }
    write(&run.join("summary.txt"), &summary)?;
    print!("{summary}");
    println!("run directory: {}", run.display());
    println!("checkpoint: {}", ckpt.display());
    match out.aborted {
        Some(e) => Err(Failure::new(
            e.code(),
            format!("{e}; best checkpoint so far saved to {}", ckpt.display()),
        )),
        None => Ok(()),
    }
}

fn identity_diff(saved: &str, current: &str) -> String {
    let parse = |t: &str| -> Vec<(String, String)> {
        t.lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect()
    };
    let now = parse(current);
    parse(saved)
        .into_iter()
        .filter_map(|(k, v)| {
            let cur = now.iter().find(|(ck, _)| *ck == k).map(|(_, cv)| cv.clone())?;
            (cur != v).then(|| format!("{k} {v} -> {cur}"))
        })
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitChoice {
    Validation,
    Test,
}

pub fn cmd_eval(cfg: &RunConfig, split: SplitChoice, force: bool) -> Outcome<()> {
    let ckpt = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Failure::new("E_CONFIG", "checkpoint is not set; pass --checkpoint <dir>"))?;
    let (corpus, graph) = load_prepared(cfg)?;
    let (params, manifest) = checkpoint::load(ckpt)?;
    let dims = [
        ("words", manifest.n_words, corpus.vocab.len()),
        ("products", manifest.n_products, corpus.products.len()),
        ("sequences", manifest.n_sequences, graph.n_sequences()),
    ];
    for (name, saved, now) in dims {
        if saved != now {
            return Err(Failure::new(
                "E_SHAPE",
                format!("checkpoint has {saved} {name} but the prepared data has {now}"),
            ));
        }
    }
    // the checkpoint fixes the model; the config supplies propagation
    let effective = RunConfig {
        dim: params.dim,
        attn_dim: params.attn_dim,
        lambda: params.lambda,
        score_fn: params.score_fn,
        ..cfg.clone()
    };
    let current = effective.model_fingerprint(&graph.fingerprint());
    if manifest.config_hash != current {
        let saved = fs::read_to_string(ckpt.join(MODEL_FILE)).unwrap_or_default();
        let diff = identity_diff(&saved, &effective.model_identity(&graph.fingerprint()));
        let msg = format!(
            "checkpoint fingerprint {} does not match current {current}{}",
            manifest.config_hash,
            if diff.is_empty() { String::new() } else { format!(" ({diff})") }
        );
        if !force {
            return Err(Failure::new("E_FINGERPRINT", format!("{msg}; pass --force to evaluate anyway")));
        }
        eprintln!("warning: {msg}");
    }
    let cases = match split {
        SplitChoice::Test => corpus.test_cases(cfg.seed, cfg.history_cap, cfg.pool_size)?,
        SplitChoice::Validation => corpus.validation_cases(cfg.seed, cfg.history_cap, cfg.pool_size)?,
    };
    let enriched = jumping_propagate(&graph, &params.initial_node_features(), &cfg.propagation())?;
    let report = evaluate(&params, &enriched.matrix, &corpus.queries, &cases, &current)?;
    let run = create_run_dir(cfg, "eval")?;
    let table = report.to_table();
    write(&run.join("report.txt"), &table)?;
    write(&run.join("report.json"), report.to_json())?;
    write(
        &run.join("cases.csv"),
        report.to_case_csv(
            |u| corpus.users.id(u).to_string(),
            |p| corpus.products.id(p).to_string(),
        ),
    )?;
    print!("{table}");
    println!("run directory: {}", run.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DiagnoseOptions {
    pub spectral: bool,
    pub sweep: bool,
    pub sweep_no_jump: bool,
}

fn random_features(n: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = rng_for(seed, "diagnose-features");
    let values = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(n, d, values).expect("shape matches")
}

pub fn cmd_diagnose(cfg: &RunConfig, opts: DiagnoseOptions) -> Outcome<()> {
    let (corpus, graph) = load_prepared(cfg)?;
    if opts.spectral && graph.n_nodes() > cfg.spectral_cap {
        return Err(Failure::new(
            "E_GRAPH_TOO_LARGE",
            format!(
                "graph has {} nodes > spectral_cap {}; raise spectral_cap or pass --no-spectral",
                graph.n_nodes(),
                cfg.spectral_cap
            ),
        ));
    }
    let (h0, source) = match &cfg.checkpoint {
        Some(ckpt) => {
            let (params, _) = checkpoint::load(ckpt)?;
            let h0 = params.initial_node_features();
            if h0.rows() != graph.n_nodes() {
                return Err(Failure::new(
                    "E_SHAPE",
                    format!("checkpoint has {} nodes, graph has {}", h0.rows(), graph.n_nodes()),
                ));
            }
            (h0, format!("checkpoint {}", ckpt.display()))
        }
        None => (random_features(graph.n_nodes(), cfg.dim, cfg.seed), format!("random (seed {})", cfg.seed)),
    };
    let mut grid = cfg.diagnose_layers.clone();
    grid.sort_unstable();
    grid.dedup();
    let max_l = grid.last().copied().unwrap_or(0).max(1);
    let report = verify_theorem1(&graph, &h0, cfg.omega, cfg.beta, max_l)?;
    let run = create_run_dir(cfg, "diagnose")?;

    let mut csv = String::from("layer,omega,beta,omega_jump_diversity,omega_plain_diversity,jump_more_diverse\n");
    for &l in &grid {
        let (jump, plain) = if l == 0 {
            (report.initial, report.initial)
        } else {
            let row = report.layers[l - 1];
            (row.with_jump, row.plain)
        };
        let _ = writeln!(csv, "{l},{},{},{jump:e},{plain:e},{}", cfg.omega, cfg.beta, jump > plain);
    }
    write(&run.join("omega.csv"), &csv)?;

    let mut summary = String::new();
    let _ = writeln!(summary, "features={source}");
    let _ = writeln!(summary, "nodes={} edges={}", graph.n_nodes(), graph.n_edges());
    let _ = writeln!(summary, "omega={} beta={}", cfg.omega, cfg.beta);
    match &report.status {
        TheoremStatus::HypothesesMet => summary.push_str("hypotheses=met\n"),
        TheoremStatus::HypothesesUnmet(why) => {
            let _ = writeln!(summary, "hypotheses=unmet ({why})");
        }
    }
    let _ = writeln!(summary, "initial_diversity={:e}", report.initial);
    let _ = writeln!(summary, "jump_diversity_at_{max_l}={:e}", report.tail_with_jump());
    let _ = writeln!(summary, "plain_decay_1_to_{max_l}={:e}", report.plain_decay());
    let _ = writeln!(
        summary,
        "layers_not_strictly_more_diverse={:?}",
        report.violations
    );

    if opts.spectral {
        let spectrum = spectral_diagnostics(&graph, cfg.omega, cfg.beta, cfg.spectral_cap)?;
        let mut s = format!("index,eigenvalue,plain_coefficient_l{max_l},jump_coefficient_l{max_l},jump_limit_coefficient\n");
        for (i, &lambda) in spectrum.eigenvalues.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{lambda:e},{:e},{:e},{:e}",
                plain_coefficient(lambda, cfg.omega, max_l),
                jump_coefficient(lambda, cfg.omega, cfg.beta, max_l),
                spectrum.limit_coefficients[i]
            );
        }
        write(&run.join("spectral.csv"), s)?;
        let _ = writeln!(summary, "jump_diversity_limit={:e}", spectrum.jump_diversity_limit(&h0));
    }

    if opts.sweep {
        let data = corpus.training_data(cfg.seed, cfg.history_cap, cfg.pool_size)?;
        let test = corpus.test_cases(cfg.seed, cfg.history_cap, cfg.pool_size)?;
        let mut betas = vec![cfg.beta];
        if opts.sweep_no_jump && cfg.beta != 0.0 {
            betas.push(0.0);
        }
        let mut s = String::from("layers,beta,best_epoch,validation_ndcg_10,test_ndcg_10,test_hr_10\n");
        for &l in &grid {
            for &beta in &betas {
                let config = TrainConfig {
                    propagation: PropagationConfig { layers: l, beta, ..cfg.propagation() },
                    ..cfg.train_config()
                };
                eprintln!("sweep: training L={l} beta={beta}");
                let out = train(&data, &graph, &config)?;
                let enriched = jumping_propagate(&graph, &out.best.initial_node_features(), &config.propagation)?;
                let rep = evaluate(&out.best, &enriched.matrix, &corpus.queries, &test, "sweep")?;
                let val = out.best_validation.map_or(f64::NAN, |m| m.ndcg_10);
                let _ = writeln!(
                    s,
                    "{l},{beta},{},{val:.6},{:.6},{:.6}",
                    out.best_epoch, rep.metrics.ndcg_10, rep.metrics.hr_10
                );
            }
        }
        write(&run.join("ndcg_vs_layers.csv"), s)?;
    }

    write(&run.join("diagnose.txt"), &summary)?;
    print!("{csv}");
    print!("{summary}");
    println!("run directory: {}", run.display());
    Ok(())
}

pub fn cmd_fetch(url: Option<&str>, out_dir: &Path, name: Option<&str>, sha256: Option<&str>) -> Outcome<()> {
    let name = name
        .map(str::to_string)
        .or_else(|| url.and_then(file_name_for))
        .ok_or_else(|| Failure::new("E_ARG", "cannot name the cached file; pass --name or a --url ending in a file name"))?;
    let dest = out_dir.join(name);
    let (status, digest) = fetch(url, &dest, sha256)?;
    let verb = match status {
        FetchStatus::Cached => "cached",
        FetchStatus::Downloaded => "downloaded",
    };
    println!("{verb} {} sha256={digest}", dest.display());
    Ok(())
}

pub fn cmd_convert_amazon(reviews: &Path, meta: &Path, out: &Path) -> Outcome<()> {
    let (records, stats) = amazon::convert(reviews, meta)?;
    write_records(out, InputFormat::from_path(out), &records)?;
    println!(
        "wrote {} records to {} ({} malformed lines, {} reviews without category)",
        stats.written,
        out.display(),
        stats.malformed,
        stats.without_category
    );
    Ok(())
}

pub fn cmd_synth(config: &SyntheticConfig, out: &Path) -> Outcome<()> {
    let records = generate(config)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::io(parent, e))?;
    }
    write_records(out, InputFormat::from_path(out), &records)?;
    println!("wrote {} synthetic records to {}", records.len(), out.display());
    Ok(())
}
