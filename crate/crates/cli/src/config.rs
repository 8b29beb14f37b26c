//! Run configuration: `key = value` files layered as
//! defaults < config file < `SBG_<KEY>` environment < command-line flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use sbg_core::corpus::InputFormat;
use sbg_core::dataset::PrepareConfig;
use sbg_core::graph::PropagationConfig;
use sbg_core::model::ScoreFn;
use sbg_core::training::{AdamConfig, TrainConfig};

use crate::fail::{Failure, Outcome};

pub const ENV_PREFIX: &str = "SBG_";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatChoice {
    Auto,
    Tsv,
    Jsonl,
}

impl FormatChoice {
    pub fn resolve(self, path: &Path) -> InputFormat {
        match self {
            FormatChoice::Auto => InputFormat::from_path(path),
            FormatChoice::Tsv => InputFormat::Tsv,
            FormatChoice::Jsonl => InputFormat::JsonLines,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // data
    pub input: Option<PathBuf>,
    pub input_format: FormatChoice,
    pub max_bad_lines: usize,
    pub data: PathBuf,
    pub interval: u64,
    pub min_count: usize,
    pub k_core: usize,
    // model
    pub dim: usize,
    pub attn_dim: usize,
    pub lambda: f64,
    pub score_fn: ScoreFn,
    pub omega: f64,
    pub beta: f64,
    pub layers: usize,
    // training
    pub k_w: usize,
    pub k_i: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub history_cap: usize,
    pub train_sequence_embeddings: bool,
    // evaluation / diagnostics
    pub pool_size: usize,
    pub checkpoint: Option<PathBuf>,
    pub diagnose_layers: Vec<usize>,
    pub spectral_cap: usize,
    // output
    pub runs_dir: PathBuf,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let prep = PrepareConfig::default();
        let train = TrainConfig::default();
        Self {
            input: None,
            input_format: FormatChoice::Auto,
            max_bad_lines: 0,
            data: PathBuf::from("data/prepared"),
            interval: prep.interval,
            min_count: prep.min_count,
            k_core: 0,
            dim: train.dim,
            attn_dim: train.attn_dim,
            lambda: train.lambda,
            score_fn: train.score_fn,
            omega: train.propagation.omega,
            beta: train.propagation.beta,
            layers: train.propagation.layers,
            k_w: train.k_w,
            k_i: train.k_i,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            adam_beta1: train.adam.beta1,
            adam_beta2: train.adam.beta2,
            adam_epsilon: train.adam.epsilon,
            epochs: train.epochs,
            patience: train.patience,
            seed: train.seed,
            history_cap: train.history_cap,
            train_sequence_embeddings: train.train_sequence_embeddings,
            pool_size: sbg_core::evaluation::DEFAULT_POOL_SIZE,
            checkpoint: None,
            diagnose_layers: vec![0, 1, 2, 4, 8, 16, 32, 64],
            spectral_cap: 2000,
            runs_dir: PathBuf::from("runs"),
            threads: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "input",
    "input_format",
    "max_bad_lines",
    "data",
    "interval",
    "min_count",
    "k_core",
    "dim",
    "attn_dim",
    "lambda",
    "score_fn",
    "omega",
    "beta",
    "layers",
    "k_w",
    "k_i",
    "batch_size",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
    "epochs",
    "patience",
    "seed",
    "history_cap",
    "train_sequence_embeddings",
    "pool_size",
    "checkpoint",
    "diagnose_layers",
    "spectral_cap",
    "runs_dir",
    "threads",
];

fn num<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T, String> {
    raw.parse()
        .map_err(|_| format!("{key}: cannot parse {raw:?}"))
}

fn boolean(key: &str, raw: &str) -> Result<bool, String> {
    match raw.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("{key}: expected a boolean, got {raw:?}")),
    }
}

fn opt_path(raw: &str) -> Option<PathBuf> {
    (!raw.is_empty()).then(|| PathBuf::from(raw))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), String> {
        let raw = raw.trim();
        match key {
            "input" => self.input = opt_path(raw),
            "input_format" => {
                self.input_format = match raw {
                    "auto" => FormatChoice::Auto,
                    "tsv" => FormatChoice::Tsv,
                    "jsonl" => FormatChoice::Jsonl,
                    _ => return Err(format!("input_format: expected auto|tsv|jsonl, got {raw:?}")),
                }
            }
            "max_bad_lines" => self.max_bad_lines = num(key, raw)?,
            "data" => self.data = PathBuf::from(raw),
            "interval" => self.interval = num(key, raw)?,
            "min_count" => self.min_count = num(key, raw)?,
            "k_core" => self.k_core = num(key, raw)?,
            "dim" => self.dim = num(key, raw)?,
            "attn_dim" => self.attn_dim = num(key, raw)?,
            "lambda" => self.lambda = num(key, raw)?,
            "score_fn" => self.score_fn = raw.parse().map_err(|e| format!("score_fn: {e}"))?,
            "omega" => self.omega = num(key, raw)?,
            "beta" => self.beta = num(key, raw)?,
            "layers" => self.layers = num(key, raw)?,
            "k_w" => self.k_w = num(key, raw)?,
            "k_i" => self.k_i = num(key, raw)?,
            "batch_size" => self.batch_size = num(key, raw)?,
            "learning_rate" => self.learning_rate = num(key, raw)?,
            "adam_beta1" => self.adam_beta1 = num(key, raw)?,
            "adam_beta2" => self.adam_beta2 = num(key, raw)?,
            "adam_epsilon" => self.adam_epsilon = num(key, raw)?,
            "epochs" => self.epochs = num(key, raw)?,
            "patience" => self.patience = num(key, raw)?,
            "seed" => self.seed = num(key, raw)?,
            "history_cap" => self.history_cap = num(key, raw)?,
            "train_sequence_embeddings" => self.train_sequence_embeddings = boolean(key, raw)?,
            "pool_size" => self.pool_size = num(key, raw)?,
            "checkpoint" => self.checkpoint = opt_path(raw),
            "diagnose_layers" => {
                self.diagnose_layers = raw
                    .split(',')
                    .map(|s| num::<usize>(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "spectral_cap" => self.spectral_cap = num(key, raw)?,
            "runs_dir" => self.runs_dir = PathBuf::from(raw),
            "threads" => self.threads = num(key, raw)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Canonical `key=value` listing in declaration order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let layers: Vec<String> = self.diagnose_layers.iter().map(usize::to_string).collect();
        let format = match self.input_format {
            FormatChoice::Auto => "auto",
            FormatChoice::Tsv => "tsv",
            FormatChoice::Jsonl => "jsonl",
        };
        let values = [
            show_path(&self.input),
            format.to_string(),
            self.max_bad_lines.to_string(),
            self.data.display().to_string(),
            self.interval.to_string(),
            self.min_count.to_string(),
            self.k_core.to_string(),
            self.dim.to_string(),
            self.attn_dim.to_string(),
            self.lambda.to_string(),
            self.score_fn.to_string(),
            self.omega.to_string(),
            self.beta.to_string(),
            self.layers.to_string(),
            self.k_w.to_string(),
            self.k_i.to_string(),
            self.batch_size.to_string(),
            self.learning_rate.to_string(),
            self.adam_beta1.to_string(),
            self.adam_beta2.to_string(),
            self.adam_epsilon.to_string(),
            self.epochs.to_string(),
            self.patience.to_string(),
            self.seed.to_string(),
            self.history_cap.to_string(),
            self.train_sequence_embeddings.to_string(),
            self.pool_size.to_string(),
            show_path(&self.checkpoint),
            layers.join(","),
            self.spectral_cap.to_string(),
            self.runs_dir.display().to_string(),
            self.threads.to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Short sha256 of the canonical dump.
    pub fn hash(&self) -> String {
        short_hash(&self.dump())
    }

    /// Hash of everything that determines what a checkpoint means: the
    /// training graph plus model and propagation settings.
    pub fn model_fingerprint(&self, graph_fingerprint: &str) -> String {
        short_hash(&self.model_identity(graph_fingerprint))
    }

    pub fn model_identity(&self, graph_fingerprint: &str) -> String {
        format!(
            "graph = {graph_fingerprint}\ndim = {}\nattn_dim = {}\nlambda = {}\nscore_fn = {}\nomega = {}\nbeta = {}\nlayers = {}\n",
            self.dim, self.attn_dim, self.lambda, self.score_fn, self.omega, self.beta, self.layers
        )
    }

    pub fn prepare_config(&self) -> PrepareConfig {
        PrepareConfig {
            min_count: self.min_count,
            interval: self.interval,
        }
    }

    pub fn propagation(&self) -> PropagationConfig {
        PropagationConfig {
            omega: self.omega,
            beta: self.beta,
            layers: self.layers,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            dim: self.dim,
            attn_dim: self.attn_dim,
            lambda: self.lambda,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            adam: AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                epsilon: self.adam_epsilon,
            },
            k_w: self.k_w,
            k_i: self.k_i,
            epochs: self.epochs,
            patience: self.patience,
            propagation: self.propagation(),
            seed: self.seed,
            score_fn: self.score_fn,
            history_cap: self.history_cap,
            train_sequence_embeddings: self.train_sequence_embeddings,
        }
    }

    /// Semantic checks; every problem is reported at once.
    pub fn validate(&self) -> Outcome<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.train_config().validate() {
            problems.push(e.to_string());
        }
        if self.interval == 0 {
            problems.push("interval must be positive".into());
        }
        if self.min_count == 0 {
            problems.push("min_count must be at least 1".into());
        }
        if self.pool_size < 2 {
            problems.push("pool_size must be at least 2".into());
        }
        if self.diagnose_layers.is_empty() {
            problems.push("diagnose_layers must list at least one depth".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Failure::new("E_CONFIG", problems.join("; ")))
        }
    }
}

pub fn short_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .take(6)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Parse a config file body into `(line, key, value)` triples.
pub fn parse_file(text: &str) -> Result<Vec<(usize, String, String)>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Layer every source and validate. Problems from all layers are collected
/// before failing so one run reports every bad key.
pub fn resolve(
    file: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    overrides: &[(String, String)],
) -> Outcome<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut problems = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::new("E_CONFIG", format!("cannot read config {}: {e}", path.display())))?;
        match parse_file(&text) {
            Ok(pairs) => {
                for (line, k, v) in pairs {
                    if let Err(e) = cfg.set(&k, &v) {
                        problems.push(format!("{}:{line}: {e}", path.display()));
                    }
                }
            }
            Err(e) => problems.push(format!("{}: {e}", path.display())),
        }
    }
    let mut env: Vec<(String, String)> = env.into_iter().collect();
    env.sort();
    for (name, value) in env {
        if let Some(key) = name.strip_prefix(ENV_PREFIX) {
            let key = key.to_ascii_lowercase();
            if KEYS.contains(&key.as_str()) {
                if let Err(e) = cfg.set(&key, &value) {
                    problems.push(format!("env {name}: {e}"));
                }
            }
        }
    }
    for (k, v) in overrides {
        if let Err(e) = cfg.set(k, v) {
            problems.push(format!("flag: {e}"));
        }
    }
    if !problems.is_empty() {
        return Err(Failure::new("E_CONFIG", problems.join("; ")));
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips_through_the_parser() {
        let mut cfg = RunConfig::default();
        cfg.set("layers", "16").unwrap();
        cfg.set("input", "a/b.tsv").unwrap();
        cfg.set("diagnose_layers", "0,3").unwrap();
        let mut back = RunConfig::default();
        for (_, k, v) in parse_file(&cfg.dump()).unwrap() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn every_key_is_settable_and_listed() {
        let cfg = RunConfig::default();
        let entries = cfg.entries();
        assert_eq!(entries.len(), KEYS.len());
        for (k, v) in entries {
            RunConfig::default().set(k, &v).unwrap();
        }
    }

    #[test]
    fn precedence_is_file_then_env_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.conf");
        std::fs::write(&file, "# comment\nlayers = 2\nomega = 0.3 # trailing\nseed = 5\n").unwrap();
        let env = vec![
            ("SBG_OMEGA".to_string(), "0.4".to_string()),
            ("SBG_SEED".to_string(), "6".to_string()),
            ("SBG_MAGAZINE_PATH".to_string(), "ignored".to_string()),
        ];
        let cfg = resolve(Some(&file), env, &[("seed".into(), "7".into())]).unwrap();
        assert_eq!((cfg.layers, cfg.omega, cfg.seed), (2, 0.4, 7));
    }

    #[test]
    fn all_problems_are_reported_together() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.conf");
        std::fs::write(&file, "layres = 2\nomega = high\n").unwrap();
        let err = resolve(Some(&file), Vec::new(), &[("bogus".into(), "1".into())]).unwrap_err();
        assert_eq!(err.code, "E_CONFIG");
        for needle in ["layres", "omega", "bogus"] {
            assert!(err.message.contains(needle), "{}", err.message);
        }
    }

    #[test]
    fn semantic_validation_runs_before_work() {
        let err = resolve(None, Vec::new(), &[("lambda".into(), "2".into())]).unwrap_err();
        assert_eq!(err.code, "E_CONFIG");
        let err = resolve(None, Vec::new(), &[("pool_size".into(), "1".into())]).unwrap_err();
        assert!(err.message.contains("pool_size"));
    }
}
