use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use labrador::corpus::synth::{generate_synthetic_corpus, SynthConfig};

fn labrador(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_labrador"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = labrador(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Relative path and bytes of every file below `root`, sorted by path.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn no_partials(dir: &Path) {
    for e in fs::read_dir(dir).unwrap() {
        let name = e.unwrap().file_name();
        assert!(!name.to_string_lossy().contains(".partial-"), "left behind {name:?}");
    }
}

/// synth + labrador-mode preprocess at small scale.
fn small_corpus(dir: &Path) {
    ok(&["synth", "--patients", "300", "--codes", "8", "--seed", "3", "--out", "syn"], dir);
    ok(
        &["preprocess", "--events", "syn/events.csv", "--min-count", "10", "--mode", "labrador", "--out", "data"],
        dir,
    );
}

const TINY_MODEL: [&str; 8] = ["--d-model", "16", "--num-layers", "1", "--ff-dim", "32", "--batch-size", "16"];

fn tiny_pretrain(dir: &Path, data: &str, out: &str, steps: &str) {
    let mut args = vec!["pretrain", "--data", data, "--steps", steps, "--learning-rate", "1e-3", "--out", out];
    args.extend(TINY_MODEL);
    ok(&args, dir);
}

#[test]
fn synth_writes_events_header_and_matches_generator() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["synth", "--patients", "100", "--codes", "10", "--seed", "7", "--out", "a"], tmp.path());
    let csv = fs::read_to_string(tmp.path().join("a/events.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "patient_id,chart_time,code_id,value");
    let oracle = generate_synthetic_corpus(&SynthConfig {
        patients: 100,
        codes: 10,
        seed: 7,
        ..SynthConfig::default()
    })
    .unwrap();
    assert_eq!(csv.lines().count() - 1, oracle.events.len());
    assert!(tmp.path().join("a/truth.json").is_file());
    assert!(tmp.path().join("a/task.csv").is_file());
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(&["synth", "--patients", "80", "--codes", "6", "--seed", "11", "--out", out], tmp.path());
    }
    ok(&["synth", "--patients", "80", "--codes", "6", "--seed", "12", "--out", "c"], tmp.path());
    let events = |d: &str| fs::read(tmp.path().join(d).join("events.csv")).unwrap();
    assert_eq!(events("a"), events("b"));
    assert_ne!(events("a"), events("c"));
    assert_eq!(tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("run.json"), r#"{"synth": {"patients": 50, "codes": 4, "seed": 2}}"#).unwrap();
    ok(&["synth", "--config", "run.json", "--patients", "30", "--out", "s"], tmp.path());
    let resolved = json(tmp.path().join("s/config.json"));
    assert_eq!(resolved["command"], "synth");
    assert_eq!(resolved["config"]["synth"]["patients"], 30);
    assert_eq!(resolved["config"]["synth"]["codes"], 4);
    assert_eq!(resolved["config"]["synth"]["seed"], 2);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("run.json"), r#"{"synht": {}}"#).unwrap();
    let out = labrador(&["synth", "--config", "run.json", "--out", "s"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));
    assert!(!tmp.path().join("s").exists());
}

#[test]
fn unwritable_output_fails_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("blocker"), "file").unwrap();
    let out = labrador(&["synth", "--patients", "20", "--out", "blocker/sub/run"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn preprocess_keeps_frequent_codes_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["synth", "--patients", "200", "--codes", "6", "--seed", "1", "--out", "syn"], tmp.path());
    let args = |out: &'static str| {
        ["preprocess", "--events", "syn/events.csv", "--min-count", "5", "--seed", "4", "--out", out]
    };
    let stdout = ok(&args("a"), tmp.path());
    assert!(stdout.contains("codes kept 6 of 6 (0 dropped"), "{stdout}");
    let summary = json(tmp.path().join("a/summary.json"));
    assert_eq!(summary["codes_dropped"], 0);
    for f in ["ecdfs.json", "vocab.json", "train", "val", "test", "config.json"] {
        assert!(tmp.path().join("a").join(f).exists(), "missing {f}");
    }
    ok(&args("b"), tmp.path());
    assert_eq!(tree(&tmp.path().join("a/train")), tree(&tmp.path().join("b/train")));
    assert_eq!(tree(&tmp.path().join("a/test")), tree(&tmp.path().join("b/test")));
    ok(&args("a"), tmp.path());
    assert_eq!(tree(&tmp.path().join("a/train")), tree(&tmp.path().join("b/train")));
    no_partials(tmp.path());
}

#[test]
fn decile_vocabulary_of_three_numeric_codes_has_34_tokens() {
    let tmp = tempfile::tempdir().unwrap();
    let mut csv = String::from("patient_id,chart_time,code_id,value\n");
    for p in 0..40 {
        for t in 0..3 {
            for (k, code) in ["100", "200", "300"].iter().enumerate() {
                csv.push_str(&format!("p{p},{t},{code},{}\n", (p * 7 + t * 3 + k) % 23));
            }
        }
    }
    fs::write(tmp.path().join("ev.csv"), csv).unwrap();
    let stdout = ok(
        &["preprocess", "--events", "ev.csv", "--min-count", "1", "--mode", "bert", "--out", "d"],
        tmp.path(),
    );
    assert!(stdout.contains("vocab size 34"), "{stdout}");
    assert_eq!(json(tmp.path().join("d/summary.json"))["vocab_size"], 34);
}

#[test]
fn malformed_event_row_reports_its_line_and_leaves_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("ev.csv"),
        "patient_id,chart_time,code_id,value\np1,1,7,0.5\np1,1,8,abc\n",
    )
    .unwrap();
    let out = labrador(&["preprocess", "--events", "ev.csv", "--out", "d"], tmp.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
    assert!(!tmp.path().join("d").exists());
    no_partials(tmp.path());
}

#[test]
fn end_to_end_smoke_runs_within_five_minutes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let start = Instant::now();
    small_corpus(dir);
    ok(
        &[
            "pretrain",
            "--data",
            "data",
            "--steps",
            "200",
            "--batch-size",
            "32",
            "--learning-rate",
            "1e-3",
            "--checkpoint-interval",
            "100",
            "--out",
            "run",
        ],
        dir,
    );
    for f in ["config.json", "metrics.csv", "report.json", "checkpoints/final", "checkpoints/step-0000100"] {
        assert!(dir.join("run").join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(dir.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "step,split,ce,mse,perplexity");
    assert_eq!(metrics.lines().filter(|l| l.contains(",train,")).count(), 200);
    let stdout = ok(&["impute", "--checkpoint", "run", "--data", "data", "--out", "imp"], dir);
    assert!(stdout.contains("imputations (continuous)"), "{stdout}");
    let report = json(dir.join("imp/report.json"));
    assert_eq!(report["ablation"], false);
    assert!(report["r"].as_f64().unwrap().is_finite());
    assert!(start.elapsed() < Duration::from_secs(300));
    no_partials(dir);
}

#[test]
fn pretrain_and_impute_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_corpus(dir);
    tiny_pretrain(dir, "data", "r1", "30");
    tiny_pretrain(dir, "data", "r2", "30");
    assert_eq!(tree(&dir.join("r1")), tree(&dir.join("r2")));
    ok(&["impute", "--checkpoint", "r1", "--data", "data", "--out", "i1"], dir);
    ok(&["impute", "--checkpoint", "r2", "--data", "data", "--out", "i2"], dir);
    let report = |d: &str| fs::read(dir.join(d).join("report.json")).unwrap();
    assert_eq!(report("i1"), report("i2"));
}

#[test]
fn ablation_ignores_trained_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_corpus(dir);
    tiny_pretrain(dir, "data", "run", "60");
    ok(&["impute", "--checkpoint", "run", "--data", "data", "--out", "t"], dir);
    ok(&["impute", "--checkpoint", "run", "--data", "data", "--ablation", "--out", "a"], dir);
    let (t, a) = (json(dir.join("t/report.json")), json(dir.join("a/report.json")));
    assert_eq!(a["ablation"], true);
    assert_ne!(t["r"], a["r"]);

    let mut other = vec!["pretrain", "--data", "data", "--steps", "5", "--seed", "9", "--out", "other"];
    other.extend(TINY_MODEL);
    ok(&other, dir);
    ok(&["impute", "--checkpoint", "other", "--data", "data", "--ablation", "--out", "a2"], dir);
    assert_eq!(
        fs::read(dir.join("a/report.json")).unwrap(),
        fs::read(dir.join("a2/report.json")).unwrap()
    );
}

#[test]
fn checkpoint_data_mismatch_names_both() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_corpus(dir);
    ok(
        &["preprocess", "--events", "syn/events.csv", "--min-count", "10", "--mode", "bert", "--out", "bdata"],
        dir,
    );
    tiny_pretrain(dir, "bdata", "brun", "2");
    let out = labrador(&["impute", "--checkpoint", "brun", "--data", "data", "--out", "x"], dir);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("config error"), "{err}");
    assert!(err.contains("brun") && err.contains("data"), "{err}");
    assert!(!dir.join("x").exists());
    no_partials(dir);
}

#[test]
fn decile_model_imputes_with_both_decoders() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&["synth", "--patients", "300", "--codes", "8", "--seed", "3", "--out", "syn"], dir);
    ok(
        &["preprocess", "--events", "syn/events.csv", "--min-count", "10", "--mode", "bert", "--out", "bdata"],
        dir,
    );
    tiny_pretrain(dir, "bdata", "brun", "20");
    ok(&["impute", "--checkpoint", "brun", "--data", "bdata", "--out", "wq"], dir);
    ok(&["impute", "--checkpoint", "brun", "--data", "bdata", "--decode", "argmax", "--out", "am"], dir);
    assert_eq!(json(dir.join("wq/report.json"))["method"], "weighted-quantile");
    assert_eq!(json(dir.join("am/report.json"))["method"], "argmax");
    let out = labrador(&["impute", "--checkpoint", "brun", "--data", "bdata", "--decode", "continuous", "--out", "c"], dir);
    assert!(!out.status.success());
}

#[test]
fn finetune_on_a_one_cell_grid_emits_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_corpus(dir);
    tiny_pretrain(dir, "data", "run", "20");
    fs::write(
        dir.join("grid.json"),
        r#"{"epochs": [3], "batch_sizes": [16], "learning_rates": [0.001], "dropouts": [0.1]}"#,
    )
    .unwrap();
    let stdout = ok(
        &[
            "finetune",
            "--checkpoint",
            "run",
            "--data",
            "data",
            "--dataset",
            "syn/task.csv",
            "--grid",
            "grid.json",
            "--replicates",
            "1",
            "--out",
            "ft",
        ],
        dir,
    );
    let grid = fs::read_to_string(dir.join("ft/grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 2, "{grid}");
    assert!(grid.starts_with("epochs,batch_size,learning_rate,dropout,mean,min,max"));
    assert!(stdout.contains("labrador,ce,") && stdout.contains("logistic,ce,"), "{stdout}");
    let report = json(dir.join("ft/report.json"));
    assert_eq!(report["grid"]["cells"].as_array().unwrap().len(), 1);
    assert_eq!(report["metric"], "ce");
}

#[test]
fn embeddings_dump_has_one_row_per_position() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_corpus(dir);
    tiny_pretrain(dir, "data", "run", "2");
    ok(
        &["dump-embeddings", "--checkpoint", "run/checkpoints/final", "--data", "data", "--limit", "5", "--out", "emb"],
        dir,
    );
    let mut rdr = csv::Reader::from_path(dir.join("emb/embeddings.csv")).unwrap();
    let header = rdr.headers().unwrap().clone();
    assert_eq!(&header.iter().take(3).collect::<Vec<_>>(), &["bag", "position", "code"]);
    assert_eq!(header.len(), 5 + 16);
    let rows: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
    let bags = labrador::corpus::read_shards(&dir.join("data/test")).unwrap();
    let expected: usize = bags.iter().take(5).map(|b| b.len()).sum();
    assert_eq!(rows.len(), expected);
    assert_eq!(rows.last().unwrap()[0].parse::<usize>().unwrap(), 4);
}
