use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn dacbert(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dacbert"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn dacbert")
}

fn ok(args: &[&str], cwd: &Path) {
    let out = dacbert(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn manifest(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Toy bundle, chunks and vocabulary in a fresh directory.
fn prepared() -> TempDir {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(
        &["gen-toy", "--out", "toy", "--train-size", "48", "--dev-size", "16"],
        d,
    );
    ok(&["chunk", "--in", "toy/corpus.conllu", "--out", "chunks"], d);
    ok(
        &[
            "build-vocab",
            "--corpus",
            "toy/corpus.conllu",
            "--size",
            "400",
            "--out",
            "vocab.txt",
        ],
        d,
    );
    tmp
}

const SMALL: [&str; 8] = [
    "--micro-batch",
    "16",
    "--accumulation",
    "16",
    "--hidden",
    "16",
    "--heads",
    "2",
];

fn stage1(d: &Path, out: &str, lr: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "--threads",
        "1",
        "pretrain-stage1",
        "--agreement",
        "all",
        "--data",
        "chunks",
        "--vocab",
        "vocab.txt",
        "--out",
        out,
        "--lr",
        lr,
    ];
    args.extend(SMALL);
    args.extend(extra);
    dacbert(&args, d)
}

#[test]
fn help_exits_zero() {
    let tmp = TempDir::new().unwrap();
    let out = dacbert(&["--help"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "ingest",
        "chunk",
        "stats",
        "build-vocab",
        "pretrain-stage1",
        "pretrain-stage2",
        "finetune",
        "ablate",
        "attn-dump",
        "eval",
    ] {
        assert!(text.contains(sub), "help lacks {sub}");
    }
}

#[test]
fn unknown_flag_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = dacbert(&["chunk", "--bogus"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn missing_input_names_path() {
    let tmp = TempDir::new().unwrap();
    let out = dacbert(&["chunk", "--in", "missing.conllu", "--out", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.conllu"));
}

#[test]
fn strict_ingest_rejects_bad_sentence() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("bad.conllu"),
        "1\tA\t_\t_\t_\t_\t2\tnsubj\t_\t_\n2\tran\t_\t_\t_\t_\t0\troot\t_\t_\n\n1\tB\t_\t_\t_\t_\t1\tnsubj\t_\t_\n\n",
    )
    .unwrap();
    ok(&["ingest", "--in", "bad.conllu", "--out", "ing"], d);
    let rejected = fs::read_to_string(d.join("ing/rejected.csv")).unwrap();
    assert_eq!(rejected.lines().count(), 2, "{rejected}");
    let out = dacbert(&["--strict", "ingest", "--in", "bad.conllu", "--out", "ing2"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seeded_runs_are_byte_identical() {
    let tmp = prepared();
    let d = tmp.path();
    for out in ["a", "b"] {
        let o = stage1(d, out, "1e-3", &["--steps", "5", "--seed", "7"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["metrics.csv", "sv_trace.csv", "comp_trace.csv", "sv.ckpt"] {
        assert_eq!(
            fs::read(d.join("a").join(name)).unwrap(),
            fs::read(d.join("b").join(name)).unwrap(),
            "{name}"
        );
    }
    let o = stage1(d, "c", "1e-3", &["--steps", "5", "--seed", "8"]);
    assert!(o.status.success());
    assert_ne!(
        fs::read(d.join("a/sv_trace.csv")).unwrap(),
        fs::read(d.join("c/sv_trace.csv")).unwrap()
    );
}

#[test]
fn config_file_below_flags() {
    let tmp = prepared();
    let d = tmp.path();
    fs::write(
        d.join("cfg.json"),
        r#"{"stage1": {"total_steps": 9, "mask_rate": 0.2, "model": {"layers": 1}}}"#,
    )
    .unwrap();
    let o = stage1(d, "s1", "1e-3", &["--steps", "5", "--config", "cfg.json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&d.join("s1/manifest.json"));
    let cfg = &m["config"];
    assert_eq!(cfg["total_steps"], 5);
    assert_eq!(cfg["mask_rate"], 0.2);
    assert_eq!(cfg["model"]["layers"], 1);
    assert_eq!(cfg["model"]["hidden_dim"], 16);
    assert_eq!(cfg["model"]["ffn_dim"], 64);
    assert_eq!(cfg["peak_fraction"], 0.5);
    assert_eq!(m["subcommand"], "pretrain-stage1");
    assert_eq!(m["seed"], 0);

    fs::write(d.join("bad.json"), r#"{"stage1": {"total_steps": "many"}}"#).unwrap();
    let o = stage1(d, "s2", "1e-3", &["--config", "bad.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numeric_failure_exits_three_after_saving() {
    let tmp = prepared();
    let d = tmp.path();
    let o = stage1(d, "bad", "1e30", &["--steps", "20"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("bad/sv.ckpt").exists());
    assert!(d.join("bad/manifest.json").exists());
    let ckpt = dacbert::SubmodelCheckpoint32::load(&d.join("bad/sv.ckpt")).unwrap();
    assert!(ckpt
        .store
        .entries()
        .iter()
        .all(|e| e.value.data().iter().all(|x| x.is_finite())));
}

fn manifests_under(dir: &Path) -> Vec<PathBuf> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            found.extend(manifests_under(&path));
        } else if path.to_string_lossy().ends_with("manifest.json") {
            found.push(path);
        }
    }
    found
}

#[test]
fn small_pipeline_end_to_end() {
    let tmp = prepared();
    let d = tmp.path();
    ok(&["ingest", "--in", "toy/corpus.conllu", "--out", "ingest"], d);
    ok(
        &[
            "stats",
            "--chunks",
            "chunks",
            "--out",
            "stats",
            "--percentiles",
            "50,95",
        ],
        d,
    );
    let o = stage1(d, "stage1", "1e-3", &["--steps", "5"]);
    assert!(o.status.success());
    let mut args = vec![
        "--threads",
        "1",
        "pretrain-stage2",
        "--corpus",
        "ingest/corpus.conllu",
        "--submodels",
        "stage1",
        "--vocab",
        "vocab.txt",
        "--layers",
        "1",
        "--steps",
        "5",
        "--max-seq-len",
        "32",
        "--lr",
        "1e-3",
        "--out",
        "stage2",
    ];
    args.extend(SMALL);
    ok(&args, d);
    let task = [
        "--model",
        "stage2/model.ckpt",
        "--vocab",
        "vocab.txt",
        "--train",
        "toy/sv_train.tsv",
        "--train-parses",
        "toy/sv_train.conllu",
        "--dev",
        "toy/sv_dev.tsv",
        "--dev-parses",
        "toy/sv_dev.conllu",
        "--epochs",
        "1",
    ];
    let mut args = vec!["finetune", "--out", "finetune"];
    args.extend(task);
    ok(&args, d);
    let mut args = vec!["ablate", "--agreement", "sv", "--seeds", "0,1", "--out", "ablate"];
    args.extend(task);
    ok(&args, d);
    ok(
        &[
            "eval",
            "--model",
            "finetune/classifier.ckpt",
            "--vocab",
            "vocab.txt",
            "--task",
            "toy/sv_dev.tsv",
            "--parses",
            "toy/sv_dev.conllu",
            "--out",
            "eval",
        ],
        d,
    );
    ok(
        &[
            "attn-dump",
            "--model",
            "stage2/model.ckpt",
            "--vocab",
            "vocab.txt",
            "--sentence-file",
            "toy/sv_dev.conllu",
            "--out",
            "attn/report.html",
        ],
        d,
    );

    let ablation = fs::read_to_string(d.join("ablate/ablation.csv")).unwrap();
    let lines: Vec<&str> = ablation.lines().collect();
    assert_eq!(lines[0], "task,agreement,seed,baseline_acc,ablated_acc,remaining_pct");
    assert_eq!(lines.len(), 1 + 2 + 1);
    assert!(lines[1].starts_with("sv,sv,0,"));
    let report = fs::read_to_string(d.join("attn/report.csv")).unwrap();
    assert_eq!(report.lines().next(), Some("token,agreement,score"));
    let stats = fs::read_to_string(d.join("stats/stats.csv")).unwrap();
    assert_eq!(stats.lines().count(), 1 + 4 * 2);
    let eval = fs::read_to_string(d.join("eval/eval.csv")).unwrap();
    assert!(eval.starts_with("target,count,accuracy,loss\ntask,16,"));

    for dir in [
        "toy", "chunks", "ingest", "stats", "stage1", "stage2", "finetune", "ablate", "eval",
    ] {
        let found = manifests_under(&d.join(dir));
        assert_eq!(found.len(), 1, "{dir}: {found:?}");
        let m = manifest(&found[0]);
        for key in [
            "subcommand",
            "version",
            "config",
            "inputs",
            "outputs",
            "started_unix",
            "finished_unix",
        ] {
            assert!(m.get(key).is_some(), "{dir} manifest lacks {key}");
        }
        for out in m["outputs"].as_array().unwrap() {
            assert!(d.join(out.as_str().unwrap()).exists(), "{dir}: {out}");
        }
    }
    assert!(d.join("vocab.txt.manifest.json").exists());
    assert!(d.join("attn/report.html.manifest.json").exists());
}
