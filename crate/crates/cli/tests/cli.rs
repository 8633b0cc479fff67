use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[world]
num_identities = 6
states_per_identity = 2
samples_per_state = 3
image_size = 32

[encoder]
image_size = 32
patch_size = 8
embed_dim = 16
depth = 1
num_heads = 2

[face_pool]
num_identities = 6
samples_per_identity = 2

[train]
epochs = 1
batch_size = 16
held_out_identities = 2

[eval]
num_triples = 200

[video]
videos_per_identity = 1
frame_width = 128
"#;

fn headsim(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_headsim"))
        .args(args)
        .env("HEADSIM_OUTPUT_ROOT", out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

#[test]
fn synth_pipeline_train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let c = cfg.to_str().unwrap();

    let synth = json(&headsim(&["synth", "--config", c], tmp.path()));
    assert_eq!(synth["world"]["total_samples"], 36);
    let manifest = tmp.path().join("world/manifest.jsonl");
    let frames = tmp.path().join("videos/frames.jsonl");
    assert!(manifest.exists() && frames.exists());

    let pipe = json(&headsim(&["pipeline", "--config", c, "--frames", frames.to_str().unwrap()], tmp.path()));
    assert_eq!(pipe["stage"], "relations");
    assert!(pipe["counts"]["samples"].as_u64().unwrap() > 0);

    let m = manifest.to_str().unwrap();
    let train = json(&headsim(&["train", "--config", c, "--manifest", m], tmp.path()));
    assert_eq!(train["variant"], "dual_cls");
    let ckpt = tmp.path().join("train/checkpoint_final.bin");
    let eval = json(&headsim(
        &["eval", "--config", c, "--manifest", m, "--checkpoint", ckpt.to_str().unwrap(), "--protocol", "identity"],
        tmp.path(),
    ));
    assert!(eval["protocols"]["identity"]["auc"].as_f64().is_some());
    assert!(eval["protocols"].get("appearance").is_none());
    assert_eq!(eval["head_projection_used"], false);

    let csv = tmp.path().join("eval/roc_identity.csv");
    let svg = tmp.path().join("roc.svg");
    let plot = headsim(&["plot-roc", csv.to_str().unwrap(), "--out", svg.to_str().unwrap()], tmp.path());
    assert!(plot.status.success());
    assert!(std::fs::read_to_string(svg).unwrap().contains("<polyline"));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = tmp.path().join("elsewhere");
    let o = headsim(
        &["eval", "--config", cfg.to_str().unwrap(), "--seed", "9", "--out", out.to_str().unwrap()],
        tmp.path(),
    );
    let report = json(&o);
    assert_eq!(report["source"], "oracle_teacher");
    assert!(out.join("eval/report.json").exists());
    assert!(!tmp.path().join("eval").exists());
}

#[test]
fn bad_input_is_reported_without_a_panic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[encoder]\npatch_size = 7\n").unwrap();
    let o = headsim(&["synth", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error:") && err.contains("patch_size"), "{err}");

    let o = headsim(&["train", "--margins", "0.1,0.3"], tmp.path());
    assert!(!o.status.success());
    let o = headsim(&["eval", "--protocol", "nonsense"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}
