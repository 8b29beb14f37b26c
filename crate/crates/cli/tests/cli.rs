use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn sbg(&self, args: &[&str]) -> Output {
        self.sbg_env(args, &[])
    }

    fn sbg_env(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_sbg"));
        cmd.current_dir(self.dir.path()).args(args);
        for (k, _) in std::env::vars() {
            if k.starts_with("SBG_") {
                cmd.env_remove(k);
            }
        }
        for (k, v) in env {
            cmd.env(k, v);
        }
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.sbg(args);
        assert!(
            out.status.success(),
            "sbg {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    /// Small planted corpus, prepared under `prep`.
    fn prepared(&self) {
        self.ok(&["synth", "--out", "records.jsonl", "--users", "120", "--products", "60", "--clusters", "3"]);
        self.ok(&["prepare", "--input", "records.jsonl", "--out", "prep"]);
    }
}

const TINY: &[&str] = &["--set", "dim=8", "--set", "attn_dim=2", "--set", "batch_size=128", "--set", "epochs=1"];

fn stderr_line(out: &Output) -> String {
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error[")).collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {err:?}");
    lines[0].to_string()
}

fn run_dir_from(stdout: &str) -> PathBuf {
    let line = stdout.lines().find(|l| l.starts_with("run directory: ")).unwrap();
    PathBuf::from(line.trim_start_matches("run directory: "))
}

fn dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().to_string(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn prepare_train_eval_round_trip() {
    let ws = Workspace::new();
    ws.prepared();
    let first = dir_files(&ws.path("prep"));
    let stdout = ws.ok(&["prepare", "--input", "records.jsonl", "--out", "prep"]);
    assert_eq!(dir_files(&ws.path("prep")), first, "prepare is not reproducible");
    assert!(stdout.contains("magazine") && stdout.contains("sequences"));

    let mut args = vec!["train", "--data", "prep", "--layers", "2"];
    args.extend_from_slice(TINY);
    let stdout = ws.ok(&args);
    let run = ws.path(run_dir_from(&stdout).to_str().unwrap());
    for f in ["config.txt", "metrics.csv", "summary.txt", "checkpoint/manifest.txt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let config = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(config.contains("layers = 2") && config.contains("dim = 8"));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    let ckpt = run.join("checkpoint");
    let ckpt = ckpt.to_str().unwrap();
    let stdout = ws.ok(&["eval", "--data", "prep", "--checkpoint", ckpt, "--layers", "2"]);
    assert!(stdout.contains("NDCG@10"));
    let eval_run = ws.path(run_dir_from(&stdout).to_str().unwrap());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_run.join("report.json")).unwrap()).unwrap();
    let n_cases = report["n_cases"].as_u64().unwrap() as usize;
    assert!(n_cases > 0);
    let cases = fs::read_to_string(eval_run.join("cases.csv")).unwrap();
    assert_eq!(cases.lines().count(), n_cases + 1);
    assert!(cases.starts_with("user_id,query_id,target,rank"));

    // a different depth changes what the checkpoint means
    let out = ws.sbg(&["eval", "--data", "prep", "--checkpoint", ckpt, "--layers", "3"]);
    assert!(!out.status.success());
    let line = stderr_line(&out);
    assert!(line.starts_with("error[E_FINGERPRINT]") && line.contains("layers 2 -> 3"), "{line}");
    ws.ok(&["eval", "--data", "prep", "--checkpoint", ckpt, "--layers", "3", "--force"]);
}

#[test]
fn config_layers_resolve_in_order() {
    let ws = Workspace::new();
    fs::write(ws.path("run.conf"), "# demo\nlayers = 2\nomega = 0.3\nseed = 9\n").unwrap();
    let out = ws.sbg_env(
        &["--config", "run.conf", "--set", "seed=11", "--print-config", "train"],
        &[("SBG_OMEGA", "0.6"), ("SBG_SEED", "10")],
    );
    assert!(out.status.success());
    let dump = String::from_utf8(out.stdout).unwrap();
    for want in ["layers = 2", "omega = 0.6", "seed = 11"] {
        assert!(dump.lines().any(|l| l == want), "{want} not in\n{dump}");
    }
    let out = ws.sbg(&["--print-config", "train", "--no-jump", "--layers", "16"]);
    let dump = String::from_utf8(out.stdout).unwrap();
    assert!(dump.contains("beta = 0\n") && dump.contains("layers = 16\n"));
}

#[test]
fn bad_configuration_fails_fast_with_one_line() {
    let ws = Workspace::new();
    fs::write(ws.path("bad.conf"), "layres = 2\n").unwrap();
    let out = ws.sbg(&["--config", "bad.conf", "--set", "lambda=3", "train"]);
    assert_eq!(out.status.code(), Some(1));
    let line = stderr_line(&out);
    assert!(line.starts_with("error[E_CONFIG]") && line.contains("layres"), "{line}");
    assert!(!ws.path("runs").exists(), "no work before validation");

    let out = ws.sbg(&["--set", "lambda=3", "train"]);
    assert!(stderr_line(&out).contains("lambda"));

    let out = ws.sbg(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).starts_with("error[E_ARG]"));

    let out = ws.sbg(&["train", "--data", "missing"]);
    assert!(stderr_line(&out).starts_with("error[E_IO]"));
}

#[test]
fn malformed_records_are_rejected_past_the_threshold() {
    let ws = Workspace::new();
    fs::write(ws.path("r.tsv"), "u1\tp1\t100\tA\tok\nnot a record\n").unwrap();
    let out = ws.sbg(&["prepare", "--input", "r.tsv", "--out", "prep"]);
    assert!(stderr_line(&out).starts_with("error[E_MALFORMED]"));
}

#[test]
fn fetch_caches_and_verifies() {
    let ws = Workspace::new();
    fs::write(ws.path("source.txt"), "payload\n").unwrap();
    let url = format!("file://{}", ws.path("source.txt").display());
    let first = ws.ok(&["fetch", "--url", &url, "--out-dir", "cache"]);
    assert!(first.starts_with("downloaded"));
    let digest = first.trim().rsplit('=').next().unwrap().to_string();
    let again = ws.ok(&["fetch", "--name", "source.txt", "--out-dir", "cache", "--sha256", &digest]);
    assert!(again.starts_with("cached"));
    assert!(ws.path("cache/source.txt.sha256").is_file());

    let out = ws.sbg(&["fetch", "--name", "source.txt", "--out-dir", "cache", "--sha256", "ab"]);
    assert!(stderr_line(&out).starts_with("error[E_CHECKSUM]"));
    let out = ws.sbg(&["fetch", "--name", "absent.json", "--out-dir", "cache"]);
    let line = stderr_line(&out);
    assert!(line.starts_with("error[E_FETCH]") && line.contains("--url"), "{line}");
}

#[test]
fn diagnose_writes_diversity_and_spectrum() {
    let ws = Workspace::new();
    ws.prepared();
    let stdout = ws.ok(&[
        "diagnose", "--data", "prep", "--layers-grid", "0,1,4", "--set", "omega=0.7", "--set", "beta=0.3",
    ]);
    let run = ws.path(run_dir_from(&stdout).to_str().unwrap());
    let omega = fs::read_to_string(run.join("omega.csv")).unwrap();
    let rows: Vec<&str> = omega.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[3].starts_with("4,0.7,0.3,") && rows[3].ends_with("true"), "{omega}");
    let spectral = fs::read_to_string(run.join("spectral.csv")).unwrap();
    let summary = fs::read_to_string(run.join("diagnose.txt")).unwrap();
    assert!(summary.contains("hypotheses=met") && summary.contains("jump_diversity_limit"));
    let nodes: usize = summary
        .lines()
        .find_map(|l| l.strip_prefix("nodes="))
        .and_then(|l| l.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(spectral.lines().count(), nodes + 1);

    let out = ws.sbg(&["diagnose", "--data", "prep", "--set", "spectral_cap=10"]);
    assert!(stderr_line(&out).starts_with("error[E_GRAPH_TOO_LARGE]"));
    let stdout = ws.ok(&["diagnose", "--data", "prep", "--set", "spectral_cap=10", "--no-spectral"]);
    assert!(!ws.path(run_dir_from(&stdout).to_str().unwrap()).join("spectral.csv").exists());
}

#[test]
fn diagnose_sweep_trains_one_model_per_depth() {
    let ws = Workspace::new();
    ws.prepared();
    let mut args = vec!["diagnose", "--data", "prep", "--layers-grid", "0,2", "--no-spectral", "--sweep", "--sweep-no-jump"];
    args.extend_from_slice(TINY);
    let stdout = ws.ok(&args);
    let run = ws.path(run_dir_from(&stdout).to_str().unwrap());
    let sweep = fs::read_to_string(run.join("ndcg_vs_layers.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 2 * 2, "{sweep}");
}
