use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn msrh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msrh")).args(args).env("MSRH_THREADS", "1").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn plan_22050_matches_published_row() {
    let o = msrh(&["plan", "--rate", "22050"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("strides 7,7,3,3"));
    assert!(s.contains("kernels 19,14,4,3"));
    assert!(s.contains("dr 441"));
    assert!(s.contains("25.0 ms"));
    assert!(s.contains("VALID"));
}

#[test]
fn plan_incompatible_rate_exits_2() {
    let o = msrh(&["plan", "--rate", "11025"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("incompatible rate: dr = 220.5"));
}

#[test]
fn plan_32000_json_is_valid() {
    let o = msrh(&["plan", "--rate", "32000", "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["valid"], true);
    assert_eq!(v["dr"], 640);
    let ms = v["receptive_field_ms"].as_f64().unwrap();
    assert!((25.0..=27.0).contains(&ms));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(msrh(&["plan"]).status.code(), Some(2));
    assert_eq!(msrh(&["report", "--run", "/nonexistent/run"]).status.code(), Some(2));
}

#[test]
fn help_lists_flags_with_defaults() {
    let s = stdout(&msrh(&["gen-corpus", "--help"]));
    assert!(s.contains("--rates") && s.contains("16000,22050,24000,48000"));
    let s = stdout(&msrh(&["labels", "--help"]));
    assert!(s.contains("--k") && s.contains("[default: 16]"));
}

#[test]
fn gen_corpus_layout_and_rerun_identity() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    fs::write(&spec, "duration_s=1.0\nnum_classes=4\ncount=10\nseed=7\n").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert!(msrh(&["gen-corpus", "--spec", p(&spec), "--out", p(out)]).status.success());
    }
    let manifest = fs::read_to_string(a.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 40);
    assert_eq!(fs::read_dir(a.join("wav")).unwrap().count(), 40);
    assert_eq!(manifest, fs::read_to_string(b.join("manifest.tsv")).unwrap());
    for f in ["wav/u00003-22050.wav", "segments.tsv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let run = |d: &Path| -> serde_json::Value { serde_json::from_str(&fs::read_to_string(d.join("run-gen-corpus.json")).unwrap()).unwrap() };
    assert_eq!(run(&a)["run_id"], run(&b)["run_id"]);

    let c = dir.path().join("c");
    assert!(msrh(&["gen-corpus", "--spec", p(&spec), "--out", p(&c), "--seed", "8"]).status.success());
    assert_ne!(run(&a)["run_id"], run(&c)["run_id"]);
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    fs::write(&spec, "duration_s=1.0\nnum_classes=4\ncount=6\nseed=3\n").unwrap();
    let corpus = dir.path().join("corpus");
    assert!(msrh(&["gen-corpus", "--spec", p(&spec), "--out", p(&corpus), "--rates", "16000,48000"]).status.success());

    let run = dir.path().join("run");
    let o = msrh(&["pretrain", "--corpus", p(&corpus), "--out", p(&run), "--steps", "2"]);
    assert_eq!(o.status.code(), Some(2), "labels are required first");

    let o = msrh(&["labels", "--corpus", p(&corpus), "--k", "8"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(corpus.join("codebook.bin").exists() && corpus.join("labels.tsv").exists());

    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"rates": [16000, 48000], "model": {"num_clusters": 8}, "train": {"micro_batch_seconds": 2.0, "accum_count": 2}, "checkpoint_every": 2}"#).unwrap();
    let o = msrh(&["pretrain", "--corpus", p(&corpus), "--config", p(&cfg), "--out", p(&run), "--steps", "3", "--seed", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("final.ckpt").exists() && run.join("checkpoints/step-000002.ckpt").exists());
    assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 4);

    let o = msrh(&["probe", "--checkpoint", p(&run.join("final.ckpt")), "--corpus", p(&corpus), "--mismatch", "--epochs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(run.join("probe.csv")).unwrap();
    assert!(csv.starts_with("model,rate,mode,accuracy"));
    assert!(csv.contains(",16000,matched,") && csv.contains(",48000,resampled,") && csv.contains(",48000,mismatch,"));

    let o = msrh(&["report", "--run", p(&run)]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["alignment"].as_array().unwrap().len(), 4);
    assert!(v["alignment"].as_array().unwrap().iter().all(|r| r["frames_per_second"] == 49));
    assert_eq!(v["training"]["steps"], 3);
    assert_eq!(v["probe"].as_array().unwrap().len(), 3);
    assert!(v["manifests"]["run-pretrain.json"]["run_id"].is_string());
}
