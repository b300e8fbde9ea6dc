use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use muxgcl::dataset::{save_dataset, Adjacency, GraphDataset};
use ndarray::Array2;
use tempfile::TempDir;

fn muxgcl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_muxgcl"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Three 12-node communities with class-indicative features.
fn tiny_dataset(dir: &Path, features: usize) {
    let (groups, size) = (3, 12);
    let n = groups * size;
    let mut edges = Vec::new();
    for g in 0..groups {
        for a in 0..size {
            for b in a + 1..size {
                if (a * 7 + b * 3) % 4 == 0 {
                    edges.push((g * size + a, g * size + b));
                }
            }
        }
        edges.push((g * size, ((g + 1) % groups) * size));
    }
    let (adj, _) = Adjacency::from_edges(n, edges).unwrap();
    let x = Array2::from_shape_fn((n, features), |(i, f)| {
        if f % groups == i / size || (i * 31 + f * 17) % 11 == 0 {
            1.0
        } else {
            0.0
        }
    });
    let labels = (0..n).map(|i| i / size).collect();
    let g = GraphDataset::new("tiny", groups, adj, x, labels).unwrap();
    save_dataset(&g, dir).unwrap();
}

const TINY_CONFIG: &str = r#"
[dataset]
path = "data"

[encoder]
hidden = [16, 16]
contrast_dim = 16

[pae.node2vec]
walks_per_node = 2
walk_length = 10
window = 3
dim = 16
epochs = 1

[train]
epochs = 6
checkpoint_every = 2
tstat_every = 2
tstat_samples = 200

[analysis]
tstat_samples = 200
negatives_per_node = 4
"#;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        tiny_dataset(&dir.path().join("data"), 9);
        fs::write(dir.path().join("tiny.config"), TINY_CONFIG).unwrap();
        Fixture { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut full = vec!["--config", "tiny.config"];
        full.extend_from_slice(args);
        muxgcl(&full, self.path())
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let mut args = vec!["train", "--out", out];
        args.extend_from_slice(extra);
        let res = self.run(&args);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
        self.path().join(out)
    }
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = muxgcl(&["train", "--config", "nope.config"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nope.config"), "{}", stderr(&out));

    let out = muxgcl(&["train"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_config_key_is_rejected() {
    let fx = Fixture::new();
    let out = fx.run(&["train", "--set", "loss.temperature=0.5", "--out", "x"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn train_writes_outputs_and_resolved_config() {
    let fx = Fixture::new();
    let dir = fx.train("run", &[]);
    for f in [
        "encoder.bin",
        "history.csv",
        "tstats.csv",
        "train_summary.json",
        "config.resolved.toml",
    ] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let ckpts: Vec<_> = fs::read_dir(dir.join("checkpoints")).unwrap().collect();
    assert_eq!(ckpts.len(), 3);
    let history = fs::read_to_string(dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 7);
    let echoed = fs::read_to_string(dir.join("config.resolved.toml")).unwrap();
    assert!(echoed.contains("walks_per_node = 2"));
    assert!(echoed.contains("tau"));
}

#[test]
fn refuses_to_overwrite_without_force() {
    let fx = Fixture::new();
    fx.train("run", &[]);
    let again = fx.run(&["train", "--out", "run"]);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"));
    let forced = fx.run(&["train", "--out", "run", "--force"]);
    assert_eq!(code(&forced), 0, "{}", stderr(&forced));
}

#[test]
fn seed_override_changes_history() {
    let fx = Fixture::new();
    let read = |dir: PathBuf| fs::read_to_string(dir.join("history.csv")).unwrap();
    let losses = |h: &str| -> Vec<String> {
        h.lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().to_string())
            .collect()
    };
    let a = read(fx.train("a", &[]));
    let b = read(fx.train("b", &["--seed", "7"]));
    let c = read(fx.train("c", &["--seed", "7"]));
    assert_ne!(losses(&a), losses(&b));
    assert_eq!(losses(&b), losses(&c));
}

#[test]
fn eval_reports_one_value_per_seed() {
    let fx = Fixture::new();
    fx.train("run", &[]);
    let out = fx.run(&[
        "eval",
        "--checkpoint",
        "run/encoder.bin",
        "--task",
        "classification",
        "--out",
        "ev",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fx.path().join("ev/eval_classification.json")).unwrap()).unwrap();
    let acc = &report["metrics"][0];
    assert_eq!(acc["name"], "accuracy");
    assert_eq!(acc["values"].as_array().unwrap().len(), 5);
    assert!(!fx.path().join("ev/eval_clustering.json").exists());

    let out = fx.run(&[
        "eval",
        "--checkpoint",
        "run/encoder.bin",
        "--task",
        "clustering",
        "--out",
        "cl",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fx.path().join("cl/eval_clustering.json")).unwrap()).unwrap();
    let names: Vec<&str> = report["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["nmi", "ari"]);
    assert!(fs::read_to_string(fx.path().join("cl/config.resolved.toml"))
        .unwrap()
        .contains("[eval]"));
}

#[test]
fn eval_shape_mismatch_is_a_data_error() {
    let fx = Fixture::new();
    fx.train("run", &[]);
    tiny_dataset(&fx.path().join("other"), 5);
    let out = fx.run(&[
        "eval",
        "--checkpoint",
        "run/encoder.bin",
        "--set",
        "dataset.path=\"other\"",
        "--out",
        "ev",
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let msg = stderr(&out);
    assert!(
        msg.contains("expects 9 input features") && msg.contains("has 5 features"),
        "{msg}"
    );
}

#[test]
fn analyze_writes_similarity_and_tstat_tables() {
    let fx = Fixture::new();
    fx.train("run", &[]);
    let out = fx.run(&["analyze", "--epoch-glob", "run/checkpoints/epoch_*.bin", "--out", "an"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let fits = fs::read_to_string(fx.path().join("an/tstat_fits.csv")).unwrap();
    assert_eq!(fits.lines().count(), 1 + 2 * 3);
    let summary = fs::read_to_string(fx.path().join("an/similarity_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 9);
    assert!(fx.path().join("an/tstat_samples.csv").is_file());
    assert!(fx.path().join("an/similarity_m0_n2.csv").is_file());
}

#[test]
fn benchmark_rejects_too_few_epochs() {
    let fx = Fixture::new();
    let out = fx.run(&["benchmark", "--epochs", "1", "--out", "b"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("minimum"));
}

#[test]
fn benchmark_prints_per_stage_medians() {
    let fx = Fixture::new();
    let out = fx.run(&["benchmark", "--out", "b"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    for stage in [
        "augment",
        "forward",
        "loss",
        "backward",
        "update",
        "epoch",
        "ratio mux/grace",
    ] {
        assert!(text.contains(stage), "missing {stage} in\n{text}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fx.path().join("b/benchmark.json")).unwrap()).unwrap();
    assert_eq!(report["mux"]["measured_epochs"], 20);
    assert_eq!(report["grace"]["mode"], "grace");
}

fn shipped(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn shipped_configs_validate() {
    let dir = TempDir::new().unwrap();
    for name in ["cora.config", "citeseer.config"] {
        let cfg = shipped(name);
        let out = muxgcl(&["prepare", "--config", cfg.to_str().unwrap()], dir.path());
        assert_eq!(code(&out), 0, "{name}: {}", stderr(&out));
        assert!(stdout(&out).contains("\"num_nodes\""));
    }
    let photo = muxgcl::RunConfig::from_file(shipped("photo.config"), &[]).unwrap();
    assert!(!photo.dataset.row_normalize_features);
}

/// Twenty epochs of the shipped Cora configuration. Patch embeddings are a
/// one-off cached artefact and are prepared before the clock starts.
#[test]
fn cora_smoke_run() {
    let dir = TempDir::new().unwrap();
    let cfg = shipped("cora.config");
    let cfg = cfg.to_str().unwrap();
    let cache = dir.path().join("cora.pae");
    let cache = cache.to_str().unwrap();
    let out = muxgcl(&["prepare", "--config", cfg, "--pae-cache", cache], dir.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let t = Instant::now();
    let out = muxgcl(
        &[
            "train",
            "--config",
            cfg,
            "--pae-cache",
            cache,
            "--epochs",
            "20",
            "--out",
            "smoke",
        ],
        dir.path(),
    );
    let secs = t.elapsed().as_secs_f64();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(secs < 60.0, "20 epochs took {secs:.1}s");
    let history = fs::read_to_string(dir.path().join("smoke/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 21);
}
