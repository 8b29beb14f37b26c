mod amazon;
mod commands;
mod config;
mod fail;
mod fetch;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sbg_core::synthetic::SyntheticConfig;

use commands::{DiagnoseOptions, SplitChoice};
use config::RunConfig;
use fail::{Failure, Outcome};

/// Product search over a successive-behavior graph.
#[derive(Debug, Parser)]
#[command(name = "sbg", version)]
struct Cli {
    /// `key = value` config file (defaults < file < SBG_<KEY> env < flags).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the effective config and exit without running the command.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Download a file into a local cache, verifying its sha256.
    Fetch(FetchArgs),
    /// Join Amazon review and metadata dumps into review records.
    ConvertAmazon(ConvertArgs),
    /// Write a synthetic corpus with planted cluster structure.
    Synth(SynthArgs),
    /// Ingest review records and write the prepared corpus and graph.
    Prepare(PrepareArgs),
    /// Train a model and save the best checkpoint.
    Train(TrainArgs),
    /// Rank held-out targets with a checkpoint and report metrics.
    Eval(EvalArgs),
    /// Diversity and spectral diagnostics of the propagation.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
struct FetchArgs {
    /// Source URL (`http(s)://`, `file://` or a local path).
    #[arg(long)]
    url: Option<String>,
    /// Cache directory.
    #[arg(long, default_value = "data/raw")]
    out_dir: PathBuf,
    /// Cached file name (defaults to the URL's last segment).
    #[arg(long)]
    name: Option<String>,
    /// Expected sha256 of the file.
    #[arg(long)]
    sha256: Option<String>,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    /// Reviews file, JSON lines, optionally gzipped.
    #[arg(long)]
    reviews: PathBuf,
    /// Product metadata file, JSON lines, optionally gzipped.
    #[arg(long)]
    meta: PathBuf,
    /// Output records (`.jsonl` or `.tsv`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output records (`.jsonl` or `.tsv`).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SyntheticConfig::default().users)]
    users: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().products)]
    products: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().clusters)]
    clusters: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().subclusters)]
    subclusters: usize,
    #[arg(long = "synth-seed", default_value_t = SyntheticConfig::default().seed)]
    synth_seed: u64,
}

#[derive(Debug, Args)]
struct PrepareArgs {
    /// Review records file (sets `input`).
    #[arg(long)]
    input: Option<String>,
    /// Output directory (sets `data`).
    #[arg(long)]
    out: Option<String>,
    /// Keep only users and products with at least K reviews (sets `k_core`).
    #[arg(long)]
    k_core: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Prepared corpus directory (sets `data`).
    #[arg(long)]
    data: Option<String>,
    /// Propagation depth L (sets `layers`).
    #[arg(long)]
    layers: Option<String>,
    /// Disable jumping connections (sets `beta = 0`).
    #[arg(long)]
    no_jump: bool,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Validation,
    Test,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Prepared corpus directory (sets `data`).
    #[arg(long)]
    data: Option<String>,
    /// Checkpoint directory (sets `checkpoint`).
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Evaluate even if the checkpoint was trained under a different config.
    #[arg(long)]
    force: bool,
    /// Propagation depth L (sets `layers`).
    #[arg(long)]
    layers: Option<String>,
    /// Disable jumping connections (sets `beta = 0`).
    #[arg(long)]
    no_jump: bool,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    /// Prepared corpus directory (sets `data`).
    #[arg(long)]
    data: Option<String>,
    /// Use a checkpoint's embeddings instead of random features.
    #[arg(long)]
    checkpoint: Option<String>,
    /// Comma-separated depths (sets `diagnose_layers`).
    #[arg(long)]
    layers_grid: Option<String>,
    /// Skip the dense spectral decomposition.
    #[arg(long)]
    no_spectral: bool,
    /// Train one model per depth and record test NDCG@10.
    #[arg(long)]
    sweep: bool,
    /// With --sweep, also train without jumping connections.
    #[arg(long, requires = "sweep")]
    sweep_no_jump: bool,
}

fn flag(out: &mut Vec<(String, String)>, key: &str, value: &Option<String>) {
    if let Some(v) = value {
        out.push((key.to_string(), v.clone()));
    }
}

/// Command flags expressed as config overrides.
fn command_overrides(cmd: &Command) -> Vec<(String, String)> {
    let mut out = Vec::new();
    match cmd {
        Command::Prepare(a) => {
            flag(&mut out, "input", &a.input);
            flag(&mut out, "data", &a.out);
            flag(&mut out, "k_core", &a.k_core);
        }
        Command::Train(a) => {
            flag(&mut out, "data", &a.data);
            flag(&mut out, "layers", &a.layers);
            flag(&mut out, "epochs", &a.epochs);
            flag(&mut out, "seed", &a.seed);
            if a.no_jump {
                out.push(("beta".into(), "0".into()));
            }
        }
        Command::Eval(a) => {
            flag(&mut out, "data", &a.data);
            flag(&mut out, "checkpoint", &a.checkpoint);
            flag(&mut out, "layers", &a.layers);
            if a.no_jump {
                out.push(("beta".into(), "0".into()));
            }
        }
        Command::Diagnose(a) => {
            flag(&mut out, "data", &a.data);
            flag(&mut out, "checkpoint", &a.checkpoint);
            flag(&mut out, "diagnose_layers", &a.layers_grid);
        }
        Command::Fetch(_) | Command::ConvertAmazon(_) | Command::Synth(_) => {}
    }
    out
}

fn resolve_config(cli: &Cli) -> Outcome<RunConfig> {
    let mut overrides = Vec::new();
    for raw in &cli.set {
        let (k, v) = raw
            .split_once('=')
            .ok_or_else(|| Failure::new("E_CONFIG", format!("--set expects KEY=VALUE, got {raw:?}")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    overrides.extend(command_overrides(&cli.command));
    config::resolve(cli.config.as_deref(), std::env::vars(), &overrides)
}

fn run(cli: Cli) -> Outcome<()> {
    let cfg = resolve_config(&cli)?;
    if cli.print_config {
        print!("{}", cfg.dump());
        return Ok(());
    }
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| Failure::new("E_CONFIG", format!("threads: {e}")))?;
    }
    match &cli.command {
        Command::Fetch(a) => commands::cmd_fetch(a.url.as_deref(), &a.out_dir, a.name.as_deref(), a.sha256.as_deref()),
        Command::ConvertAmazon(a) => commands::cmd_convert_amazon(&a.reviews, &a.meta, &a.out),
        Command::Synth(a) => {
            let synth = SyntheticConfig {
                users: a.users,
                products: a.products,
                clusters: a.clusters,
                subclusters: a.subclusters,
                seed: a.synth_seed,
                ..SyntheticConfig::default()
            };
            commands::cmd_synth(&synth, &a.out)
        }
        Command::Prepare(_) => commands::cmd_prepare(&cfg),
        Command::Train(_) => commands::cmd_train(&cfg),
        Command::Eval(a) => {
            let split = match a.split {
                SplitArg::Validation => SplitChoice::Validation,
                SplitArg::Test => SplitChoice::Test,
            };
            commands::cmd_eval(&cfg, split, a.force)
        }
        Command::Diagnose(a) => commands::cmd_diagnose(
            &cfg,
            DiagnoseOptions {
                spectral: !a.no_spectral,
                sweep: a.sweep,
                sweep_no_jump: a.sweep_no_jump,
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("{}", Failure::new("E_ARG", first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
