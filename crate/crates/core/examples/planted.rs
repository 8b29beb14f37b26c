//! Train on the planted-structure corpus at several depths and print test
//! NDCG@10 per run.
//!
//! cargo run --release -p sbg-core --example planted -- [seed] [L,...]

use sbg_core::dataset::{prepare, PrepareConfig};
use sbg_core::evaluation::evaluate;
use sbg_core::graph::{jumping_propagate, PropagationConfig};
use sbg_core::synthetic::{generate, SyntheticConfig};
use sbg_core::training::{train, TrainConfig};

fn main() -> sbg_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let layers: Vec<usize> = args
        .get(2)
        .map(|s| s.split(',').filter_map(|x| x.parse().ok()).collect())
        .unwrap_or_else(|| vec![0, 4]);
    let records = generate(&SyntheticConfig { seed, ..SyntheticConfig::default() })?;
    let prepared = prepare(&records, PrepareConfig::default())?;
    let graph = prepared.graph()?;
    let env = |k: &str| std::env::var(k).ok().and_then(|v| v.parse::<f64>().ok());
    let mut base = TrainConfig { seed, ..TrainConfig::default() };
    if let Some(v) = env("PLANTED_LR") {
        base.learning_rate = v;
    }
    if let Some(v) = env("PLANTED_EPOCHS") {
        base.epochs = v as usize;
    }
    if let Some(v) = env("PLANTED_BATCH") {
        base.batch_size = v as usize;
    }
    if let Some(v) = env("PLANTED_PATIENCE") {
        base.patience = v as usize;
    }
    if let Some(v) = env("PLANTED_OMEGA") {
        base.propagation.omega = v;
    }
    let data = prepared.training_data(seed, base.history_cap, 1000)?;
    let test = prepared.test_cases(seed, base.history_cap, 1000)?;
    println!("{}", prepared.stats(&graph, records.len()).render());
    for &l in &layers {
        for beta in [base.propagation.beta, 0.0] {
            if beta == 0.0 && l < 64 {
                continue;
            }
            let config = TrainConfig {
                propagation: PropagationConfig { layers: l, beta, ..base.propagation },
                ..base.clone()
            };
            let started = std::time::Instant::now();
            let out = train(&data, &graph, &config)?;
            if std::env::var("PLANTED_LOG").is_ok() {
                print!("{}", sbg_core::training::metrics_csv(&out.log));
            }
            let enriched = jumping_propagate(&graph, &out.best.initial_node_features(), &config.propagation)?;
            let rep = evaluate(&out.best, &enriched.matrix, &data.queries, &test, "planted")?;
            println!(
                "seed={seed} L={l} beta={beta} best_epoch={} val_ndcg10={:.4} test_ndcg10={:.4} hr10={:.4} ({:.1}s)",
                out.best_epoch,
                out.best_validation.map(|m| m.ndcg_10).unwrap_or(0.0),
                rep.metrics.ndcg_10,
                rep.metrics.hr_10,
                started.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
