use sbg_core::dataset::{prepare, PrepareConfig, PreparedCorpus};
use sbg_core::graph::PropagationConfig;
use sbg_core::synthetic::{generate, SyntheticConfig};
use sbg_core::training::{train, TrainConfig};

fn toy_corpus() -> (PreparedCorpus, usize) {
    // ~50 reviews
    let records = generate(&SyntheticConfig {
        users: 6,
        products: 12,
        clusters: 2,
        subclusters: 2,
        sequences_per_user: (3, 3),
        items_per_sequence: (2, 4),
        seed: 3,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let n = records.len();
    (prepare(&records, PrepareConfig { min_count: 1, ..PrepareConfig::default() }).unwrap(), n)
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        dim: 8,
        attn_dim: 2,
        epochs: 2,
        propagation: PropagationConfig {
            layers: 2,
            ..PropagationConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn two_epochs_reduce_the_training_loss() {
    let (corpus, n) = toy_corpus();
    assert!((40..=60).contains(&n), "{n} records");
    let graph = corpus.graph().unwrap();
    let data = corpus.training_data(1, 20, 1000).unwrap();
    let out = train(&data, &graph, &toy_config()).unwrap();
    assert!(out.aborted.is_none());
    assert_eq!(out.log.len(), 2);
    let total = |i: usize| out.log[i].loss_pr + out.log[i].loss_lm;
    assert!(total(1) < total(0), "{} !< {}", total(1), total(0));
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let (corpus, _) = toy_corpus();
    let graph = corpus.graph().unwrap();
    let data = corpus.training_data(1, 20, 1000).unwrap();
    let config = TrainConfig { epochs: 3, ..toy_config() };
    let a = train(&data, &graph, &config).unwrap();
    let b = train(&data, &graph, &config).unwrap();
    assert_eq!(a.best, b.best);
    assert_eq!(a.best_epoch, b.best_epoch);
    let strip = |o: &sbg_core::training::TrainOutcome| -> Vec<(f64, f64)> {
        o.log.iter().map(|e| (e.loss_pr, e.loss_lm)).collect()
    };
    assert_eq!(strip(&a), strip(&b));
    let c = train(&data, &graph, &TrainConfig { seed: 43, ..config }).unwrap();
    assert_ne!(a.best, c.best);
}

#[test]
fn frozen_sequence_embeddings_stay_at_initialization() {
    let (corpus, _) = toy_corpus();
    let graph = corpus.graph().unwrap();
    let data = corpus.training_data(1, 20, 1000).unwrap();
    let config = TrainConfig {
        train_sequence_embeddings: false,
        ..toy_config()
    };
    let init = sbg_core::training::initial_params(&data, &graph, &config).unwrap();
    let out = train(&data, &graph, &config).unwrap();
    assert_eq!(out.best.tensors.sequence_embeddings, init.tensors.sequence_embeddings);
    assert_ne!(out.best.tensors.product_embeddings, init.tensors.product_embeddings);
}

#[test]
fn invalid_configs_are_rejected() {
    let (corpus, _) = toy_corpus();
    let graph = corpus.graph().unwrap();
    let data = corpus.training_data(1, 20, 1000).unwrap();
    for bad in [
        TrainConfig { learning_rate: 0.0, ..toy_config() },
        TrainConfig { batch_size: 0, ..toy_config() },
        TrainConfig { lambda: 1.5, ..toy_config() },
        TrainConfig {
            propagation: PropagationConfig { omega: 1.2, ..PropagationConfig::default() },
            ..toy_config()
        },
    ] {
        assert!(matches!(train(&data, &graph, &bad), Err(sbg_core::Error::Config(_))));
    }
}
