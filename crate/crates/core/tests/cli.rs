use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use viewreid::distance::{distance_matrix, DistanceOptions, FusionWeights};
use viewreid::eval::{evaluate, EvalProtocol};
use viewreid::io;

fn viewreid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_viewreid"))
        .args(args)
        .env_remove("VIEWREID_THREADS")
        .output()
        .expect("spawn viewreid")
}

fn ok(args: &[&str]) -> Output {
    let out = viewreid(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Small dataset plus pooled embeddings.
fn prepared(dir: &Path) {
    ok(&["gen-synth", "--ids", "12", "--per-id", "6", "--seed", "3", "--out", &s(&dir.join("data"))]);
    ok(&["pool", "--manifest", &s(&dir.join("data/manifest.jsonl")), "--out", &s(&dir.join("emb"))]);
}

#[test]
fn every_output_directory_has_a_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d);
    ok(&["dist", "--query", &s(&d.join("emb/query")), "--gallery", &s(&d.join("emb/gallery")), "--out", &s(&d.join("dist.bin"))]);
    ok(&["eval", "--dist", &s(&d.join("dist.bin")), "--manifest", &s(&d.join("data/manifest.jsonl")), "--out", &s(&d.join("report"))]);
    for sub in ["data", "emb", "report"] {
        let echo: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(d.join(sub).join("run_config.json")).unwrap()).unwrap();
        assert!(echo["command"].is_string(), "{sub}");
    }
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("dist.bin.json")).unwrap()).unwrap();
    assert_eq!(side["config"]["resolved"]["lambda2"], 0.5);
    assert!(fs::read_to_string(d.join("report/report.txt")).unwrap().starts_with("map="));
}

#[test]
fn lambda2_zero_matches_global_only_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d);
    ok(&[
        "dist", "--query", &s(&d.join("emb/query")), "--gallery", &s(&d.join("emb/gallery")),
        "--lambda2", "0", "--out", &s(&d.join("dist.bin")),
    ]);
    ok(&["eval", "--dist", &s(&d.join("dist.bin")), "--manifest", &s(&d.join("data/manifest.jsonl")), "--out", &s(&d.join("report"))]);

    // Global-only reference computed in-process from the same embeddings.
    let manifest = io::read_manifest(d.join("data/manifest.jsonl")).unwrap();
    let load = |split: &str| {
        let mut ids: Vec<String> = fs::read_dir(d.join("emb").join(split))
            .unwrap()
            .filter_map(|e| {
                let p = e.unwrap().path();
                (p.extension()? == "emb").then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
            })
            .collect();
        ids.sort();
        let embs: Vec<_> = ids.iter().map(|id| io::read_embedding(d.join("emb").join(split), id).unwrap()).collect();
        (ids, embs)
    };
    let (qids, q) = load("query");
    let (gids, g) = load("gallery");
    let opts = DistanceOptions { weights: FusionWeights::global_only(), ..Default::default() };
    let dm = distance_matrix(&q, &g, &opts).unwrap().into_matrix(qids, gids).unwrap();
    let expected = evaluate(&dm, &manifest, &EvalProtocol::cross_camera()).unwrap().to_text();
    assert_eq!(fs::read_to_string(d.join("report/report.txt")).unwrap(), expected);
}

#[test]
fn missing_manifest_exits_3_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d);
    ok(&["dist", "--query", &s(&d.join("emb/query")), "--gallery", &s(&d.join("emb/gallery")), "--out", &s(&d.join("dist.bin"))]);
    let out = viewreid(&["eval", "--dist", &s(&d.join("dist.bin")), "--manifest", &s(&d.join("nope.jsonl")), "--out", &s(&d.join("report"))]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: IoError: "), "{err}");
    assert_eq!(err.lines().count(), 1);
    assert!(!d.join("report").exists());
}

#[test]
fn exit_codes_by_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // usage
    assert_eq!(viewreid(&["dist"]).status.code(), Some(2));
    assert_eq!(viewreid(&["no-such-command"]).status.code(), Some(2));
    // invalid configuration
    let out = viewreid(&["dist", "--query", "q", "--gallery", "g", "--lambda1", "0", "--lambda2", "0", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: InvalidConfig: "));
    // data
    fs::write(d.join("bad.bin"), b"XXXX\x01\x01\x01\x01\x00\x00\x00").unwrap();
    let out = viewreid(&["heatmap", "--a", &s(&d.join("bad.bin")), "--b", &s(&d.join("bad.bin")), "--out", &s(&d.join("h.bin"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: BadMagic: "));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d);
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let path = d.join(format!("dist{threads}.bin"));
        ok(&["--threads", threads, "dist", "--query", &s(&d.join("emb/query")), "--gallery", &s(&d.join("emb/gallery")), "--out", &s(&path)]);
        outputs.push(fs::read(path).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let out = Command::new(env!("CARGO_BIN_EXE_viewreid"))
        .args(["dist", "--query", &s(&d.join("emb/query")), "--gallery", &s(&d.join("emb/gallery")), "--out", &s(&d.join("env.bin"))])
        .env("VIEWREID_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(d.join("env.bin")).unwrap(), outputs[0]);
}

#[test]
fn train_toy_writes_checkpoint_log_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-synth", "--ids", "12", "--per-id", "6", "--seed", "1", "--out", &s(&d.join("data"))]);
    fs::write(
        d.join("train.toml"),
        "p = 3\nk = 2\nepochs = 2\nhidden_dim = 8\nembed_dim = 8\n[schedule]\nbase_rate = 0.01\nwarmup_steps = 2\nmilestones = [5]\n",
    )
    .unwrap();
    ok(&["train-toy", "--manifest", &s(&d.join("data/manifest.jsonl")), "--config", &s(&d.join("train.toml")), "--out", &s(&d.join("run"))]);
    let run = d.join("run");
    for f in ["checkpoint/metadata.json", "checkpoint/w1.bin", "train_log.jsonl", "report.txt", "run_config.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 3);
    let (model, cfg) = viewreid::trainer::ToyEmbedder::load(run.join("checkpoint")).unwrap();
    assert_eq!(cfg.epochs, 2);
    assert_eq!(model.shape().hidden_dim, 8);

    fs::write(d.join("bad.toml"), "p = 1\n").unwrap();
    let out = viewreid(&["train-toy", "--manifest", &s(&d.join("data/manifest.jsonl")), "--config", &s(&d.join("bad.toml")), "--out", &s(&d.join("run2"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.join("run2").exists());
}

#[test]
fn heatmap_writes_container_and_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-synth", "--ids", "2", "--per-id", "2", "--seed", "0", "--out", &s(&d.join("data"))]);
    let manifest = io::read_manifest(d.join("data/manifest.jsonl")).unwrap();
    let recs = manifest.records();
    let a = manifest.resolve(&recs[0].feature_path);
    let b = manifest.resolve(&recs[2].feature_path);
    ok(&["heatmap", "--a", &s(&a), "--b", &s(&b), "--out", &s(&d.join("h.bin"))]);
    let t = io::read_tensor(d.join("h.bin")).unwrap();
    assert_eq!(t.dims(), &[8, 8]);
    assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let pgm = fs::read(d.join("h.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(pgm.len(), b"P5\n8 8\n255\n".len() + 64);
}
