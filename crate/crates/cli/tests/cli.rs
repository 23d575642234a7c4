use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fidelity_lab::diagnostics::{probe_dynamics, BatchLayout};
use fidelity_lab::model::checkpoint;
use fidelity_lab::tasks::{read_drift_jsonl, read_overwrite_jsonl, to_jsonl, DriftQAItem};
use fidelity_lab::training::{read_metrics_csv, CompressionSample};
use fidelity_lab::vocab::Vocabulary;
use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fidelity-lab"))
        .args(args)
        .env_remove("FIDELITY_LAB_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap_or(Value::Null)
}

fn dir(root: &TempDir, name: &str) -> PathBuf {
    let p = root.path().join(name);
    std::fs::create_dir_all(&p).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn manifest(p: &Path) -> Value {
    serde_json::from_str(&read(&p.join("manifest.json"))).unwrap()
}

fn gen(root: &TempDir, name: &str, extra: &[&str]) -> PathBuf {
    let d = dir(root, name);
    let mut args = vec!["gen-data", "--out", s(&d)];
    args.extend_from_slice(extra);
    ok(&args);
    d
}

fn train(root: &TempDir, data: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let d = dir(root, name);
    let mut args = vec!["train", "--data", s(data), "--out", s(&d), "--no-plots"];
    args.extend_from_slice(extra);
    ok(&args);
    d
}

const DATA_FILES: [&str; 6] = [
    "world.json",
    "vocab.json",
    "pretraining.txt",
    "compression.txt",
    "overwrite.jsonl",
    "drift.jsonl",
];

#[test]
fn gen_data_is_byte_reproducible() {
    let root = TempDir::new().unwrap();
    let (a, b) = (
        gen(&root, "a", &["--seed", "3"]),
        gen(&root, "b", &["--seed", "3"]),
    );
    for f in DATA_FILES {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    let c = gen(&root, "c", &["--seed", "4"]);
    assert_ne!(read(&a.join("drift.jsonl")), read(&c.join("drift.jsonl")));

    // the environment seed applies without a flag, and the flag wins over it
    let env = dir(&root, "env");
    let out = Command::new(env!("CARGO_BIN_EXE_fidelity-lab"))
        .args(["gen-data", "--out", s(&env)])
        .env("FIDELITY_LAB_SEED", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        read(&env.join("overwrite.jsonl")),
        read(&a.join("overwrite.jsonl"))
    );
    let flag = dir(&root, "flag");
    let out = Command::new(env!("CARGO_BIN_EXE_fidelity-lab"))
        .args(["gen-data", "--out", s(&flag), "--seed", "4"])
        .env("FIDELITY_LAB_SEED", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        read(&flag.join("overwrite.jsonl")),
        read(&c.join("overwrite.jsonl"))
    );
    assert_eq!(manifest(&flag)["seed"], 4);
}

#[test]
fn missing_output_directory_is_an_io_error() {
    let root = TempDir::new().unwrap();
    let missing = root.path().join("nowhere");
    let out = run(&["gen-data", "--out", s(&missing)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn generated_outputs_match_their_schemas() {
    let root = TempDir::new().unwrap();
    let d = gen(&root, "d", &[]);
    let ow = read_overwrite_jsonl(&read(&d.join("overwrite.jsonl"))).unwrap();
    let dr = read_drift_jsonl(&read(&d.join("drift.jsonl"))).unwrap();
    assert_eq!((ow.len(), dr.len()), (50, 140));
    let vocab: Vocabulary = serde_json::from_str(&read(&d.join("vocab.json"))).unwrap();
    for line in read(&d.join("pretraining.txt"))
        .lines()
        .chain(read(&d.join("compression.txt")).lines())
    {
        vocab.encode(line).unwrap();
    }
    let world: Value = serde_json::from_str(&read(&d.join("world.json"))).unwrap();
    assert_eq!(world["entities"].as_array().unwrap().len(), 50);
    for oracle in ["verbatim", "prior", "abstain", "uniform"] {
        checkpoint::load(&d.join("oracles").join(format!("{oracle}.ckpt"))).unwrap();
    }
    assert_eq!(manifest(&d)["status"], "completed");
}

#[test]
fn training_config_is_validated_and_recorded() {
    let root = TempDir::new().unwrap();
    let data = gen(&root, "data", &[]);
    let bad = dir(&root, "bad");
    let out = run(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&bad),
        "--steps",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["train", "--data", s(&data), "--out", s(&bad), "--rate", "5"]);
    assert_eq!(out.status.code(), Some(2));

    let args = [
        "--rate",
        "4",
        "--steps",
        "30",
        "--probe-interval",
        "15",
        "--checkpoint-interval",
        "15",
        "--seed",
        "9",
    ];
    let first = train(&root, &data, "first", &args);
    let m = manifest(&first);
    assert_eq!(m["config"]["memory_slots"], 16);
    assert_eq!(m["config"]["train"]["seed"], 9);
    assert_eq!(m["seed"], 9);
    let a = read_metrics_csv(&read(&first.join("metrics.csv"))).unwrap();
    assert_eq!(a.iter().map(|r| r.step).collect::<Vec<_>>(), vec![15, 30]);

    // the manifest alone reproduces the run
    let cfg = first.join("manifest.json");
    let second = train(&root, &data, "second", &["--config", s(&cfg)]);
    let b = read_metrics_csv(&read(&second.join("metrics.csv"))).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!((x.loss.total - y.loss.total).abs() <= 1e-6);
        assert!((x.erank.unwrap() - y.erank.unwrap()).abs() <= 1e-6);
        assert!((x.entropy.unwrap() - y.entropy.unwrap()).abs() <= 1e-6);
    }
}

#[test]
fn oracle_checkpoints_close_the_loop() {
    let root = TempDir::new().unwrap();
    let d = gen(&root, "d", &[]);
    let ev = dir(&root, "ev");
    let oracle = |n: &str| d.join("oracles").join(format!("{n}.ckpt"));
    let (ow, dr) = (d.join("overwrite.jsonl"), d.join("drift.jsonl"));
    let eval = |kind: &str, ckpt: &Path, data: &Path| {
        ok(&[
            "eval",
            kind,
            "--checkpoint",
            s(ckpt),
            "--data",
            s(data),
            "--out",
            s(&ev),
        ])
    };
    assert_eq!(eval("overwrite", &oracle("verbatim"), &ow)["accuracy"], 1.0);
    assert_eq!(eval("overwrite", &oracle("prior"), &ow)["accuracy"], 0.0);
    assert_eq!(
        eval("drift", &oracle("verbatim"), &dr)["answerable_accuracy"],
        1.0
    );
    assert_eq!(eval("drift", &oracle("abstain"), &dr)["accuracy"], 0.25);
    assert_eq!(eval("overwrite", &oracle("uniform"), &ow)["accuracy"], 0.0);
    let recon = eval("recon", &oracle("verbatim"), &d.join("compression.txt"));
    assert_eq!(
        (recon["bleu"].as_f64(), recon["exact_match"].as_f64()),
        (Some(1.0), Some(1.0))
    );
}

#[test]
fn malformed_items_name_their_line() {
    let root = TempDir::new().unwrap();
    let d = gen(&root, "d", &[]);
    let mut lines: Vec<String> = read(&d.join("drift.jsonl"))
        .lines()
        .map(String::from)
        .collect();
    lines[16] = "{\"context\": \"about bob .\", \"question\": 3}".into();
    let bad = root.path().join("bad.jsonl");
    std::fs::write(&bad, lines.join("\n")).unwrap();
    let ev = dir(&root, "ev");
    let ckpt = d.join("oracles/verbatim.ckpt");
    let out = run(&[
        "eval",
        "drift",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&bad),
        "--out",
        s(&ev),
    ]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 17"));
}

#[test]
fn hand_scored_subset() {
    let root = TempDir::new().unwrap();
    let d = gen(&root, "d", &[]);
    let all = read_drift_jsonl(&read(&d.join("drift.jsonl"))).unwrap();
    let (un, ans): (Vec<DriftQAItem>, Vec<DriftQAItem>) =
        all.into_iter().partition(|i| i.is_unanswerable());
    let subset = vec![
        ans[0].clone(),
        un[0].clone(),
        ans[20].clone(),
        ans[50].clone(),
        un[10].clone(),
    ];
    let path = root.path().join("five.jsonl");
    std::fs::write(&path, to_jsonl(&subset)).unwrap();
    let ev = dir(&root, "ev");
    for (oracle, want) in [
        ("verbatim", [true, false, true, true, false]),
        ("abstain", [false, true, false, false, true]),
    ] {
        let ckpt = d.join("oracles").join(format!("{oracle}.ckpt"));
        let summary = ok(&[
            "eval",
            "drift",
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&path),
            "--out",
            s(&ev),
        ]);
        let hits = want.iter().filter(|&&c| c).count() as f64;
        assert_eq!(summary["accuracy"].as_f64().unwrap(), hits / 5.0);
        let report: Value = serde_json::from_str(&read(&ev.join("drift.json"))).unwrap();
        let got: Vec<bool> = report["records"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| r["correct"].as_bool().unwrap())
            .collect();
        assert_eq!(got, want, "{oracle}");
    }
}

#[test]
fn decouple_and_correlate() {
    let root = TempDir::new().unwrap();
    let out = dir(&root, "out");
    let same = root.path().join("same.csv");
    std::fs::write(
        &same,
        "label,bleu,qa_overwrite,qa_drift\na,0.9,0.7,0.5\nb,0.9,0.7,0.5\n",
    )
    .unwrap();
    let r = run(&["analyze", "decouple", "--input", s(&same), "--out", s(&out)]);
    assert!(r.status.success());
    assert!(String::from_utf8_lossy(&r.stdout).contains("flags: 0"));

    let xy = root.path().join("xy.csv");
    let rows: String = (0..12)
        .map(|i| format!("{i},{}\n", -(i as f64) * 0.5))
        .collect();
    std::fs::write(&xy, format!("x,y\n{rows}")).unwrap();
    let r = run(&[
        "analyze",
        "correlate",
        "--input",
        s(&xy),
        "--x",
        "x",
        "--y",
        "y",
        "--out",
        s(&out),
        "--no-plots",
    ]);
    assert!(r.status.success());
    let text = String::from_utf8_lossy(&r.stdout);
    assert!(text.contains("pearson r = -1.000000"), "{text}");
    assert!(text.contains("spearman rho = -1.000000"), "{text}");

    let ragged = root.path().join("ragged.csv");
    std::fs::write(&ragged, "x,y\n1,2\n3\n").unwrap();
    let r = run(&[
        "analyze",
        "correlate",
        "--input",
        s(&ragged),
        "--x",
        "x",
        "--y",
        "y",
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(5));
}

#[test]
fn dynamics_csv_matches_library_trajectory() {
    let root = TempDir::new().unwrap();
    let data = gen(&root, "data", &[]);
    let run_dir = train(
        &root,
        &data,
        "run",
        &[
            "--steps",
            "40",
            "--probe-interval",
            "10",
            "--checkpoint-interval",
            "10",
        ],
    );
    let out = dir(&root, "dyn");
    ok(&[
        "analyze",
        "dynamics",
        "--run",
        s(&run_dir),
        "--out",
        s(&out),
        "--no-plots",
        "--smooth-window",
        "5",
    ]);
    let probe: Vec<CompressionSample> =
        serde_json::from_str(&read(&run_dir.join("probe.json"))).unwrap();
    let series = checkpoint::list(&run_dir).unwrap();
    assert_eq!(series.len(), 4);
    let traj = probe_dynamics(&series, &probe, BatchLayout::Flatten).unwrap();
    assert_eq!(read(&out.join("dynamics.csv")), traj.to_csv());
}
