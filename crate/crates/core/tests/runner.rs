use std::path::Path;

use headsim_core::manifest::{read_jsonl, SampleRecord};
use headsim_core::metrics::Protocol;
use headsim_core::optim::Schedule;
use headsim_core::runner::{
    checkpoint_name, cmd_eval, cmd_plot_roc, cmd_synth, cmd_train, Checkpoint, Dataset, ExperimentConfig, Overrides,
    StepRecord, Trainer, LOSS_LOG,
};

fn tiny(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = out.to_path_buf();
    cfg.world.num_identities = 8;
    cfg.world.states_per_identity = 2;
    cfg.world.samples_per_state = 4;
    cfg.world.image_size = 32;
    cfg.encoder.image_size = 32;
    cfg.encoder.patch_size = 8;
    cfg.encoder.embed_dim = 16;
    cfg.encoder.depth = 1;
    cfg.encoder.num_heads = 2;
    cfg.face_pool.num_identities = 10;
    cfg.face_pool.samples_per_identity = 2;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 16;
    cfg.train.held_out_identities = 3;
    cfg.eval.num_triples = 300;
    cfg.video.videos_per_identity = 1;
    cfg.video.frame_width = 128;
    cfg
}

#[test]
fn synth_manifest_round_trips_into_the_training_split() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let synth = cmd_synth(&cfg).unwrap();
    let records: Vec<SampleRecord> = read_jsonl(&synth.manifest).unwrap();
    assert_eq!(records.len(), 8 * 2 * 4);
    assert_eq!(synth.report.world.total_samples, records.len());
    let loaded = Dataset::from_manifest(&cfg, &synth.manifest).unwrap();
    let fresh = Dataset::synthesize(&cfg).unwrap();
    assert_eq!(loaded.train_metas(), fresh.train_metas());
    assert_eq!(loaded.held_out_metas(), fresh.held_out_metas());
    assert!(loaded.held_out.iter().all(|s| s.meta.identity >= 5));
    assert!(tmp.path().join("config.toml").exists());
}

#[test]
fn oracle_teacher_separates_identities_but_not_appearance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let art = cmd_eval(&cfg, None, None, &Protocol::ALL).unwrap();
    let r = &art.report;
    assert_eq!(r.source, "oracle_teacher");
    assert!((r.protocols["identity"].auc - 1.0).abs() < 1e-12);
    // s(R1) equals s(R2) exactly, so strict ordering never holds
    assert_eq!(r.ordering_satisfaction, 0.0);
    assert!(!r.head_projection_used);
    for f in ["report.json", "roc_identity.csv", "roc_identity.svg", "roc_appearance.csv"] {
        assert!(tmp.path().join("eval").join(f).exists(), "{f}");
    }
}

#[test]
fn resuming_from_an_epoch_checkpoint_replays_the_same_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tiny(&tmp.path().join("a"));
    let full = cmd_train(&a, None, None).unwrap();
    let spe = full.summary.steps_per_epoch;
    assert_eq!(full.summary.steps, 2 * spe);

    let b = tiny(&tmp.path().join("b"));
    let ckpt = full.dir.join(checkpoint_name(1));
    let resumed = cmd_train(&b, None, Some(&ckpt)).unwrap();
    assert_eq!(resumed.summary.resumed_from_step, spe);
    assert_eq!(resumed.records, full.records[spe..].to_vec());
    let pa = Checkpoint::load(&full.final_checkpoint).unwrap().params;
    let pb = Checkpoint::load(&resumed.final_checkpoint).unwrap().params;
    assert_eq!(pa, pb);

    // the original run's log survives a resume into the same directory
    let again = cmd_train(&a, None, Some(&ckpt)).unwrap();
    assert_eq!(again.records.len(), spe);
    let log: Vec<StepRecord> = read_jsonl(&full.dir.join(LOSS_LOG)).unwrap();
    assert_eq!(log, full.records);
}

#[test]
fn resuming_under_a_different_config_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tiny(tmp.path());
    let full = cmd_train(&a, None, None).unwrap();
    let mut other = a.clone();
    other.seed = 99;
    assert!(cmd_train(&other, None, Some(&full.final_checkpoint)).is_err());
}

#[test]
fn a_training_step_lowers_the_loss_on_its_batch() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    cfg.optimizer.warmup_steps = 0;
    cfg.optimizer.lr = 2e-4;
    let data = Dataset::synthesize(&cfg).unwrap();
    let mut t = Trainer::new(&cfg, &data).unwrap();
    let before = t.train_step().unwrap();
    // replay step 0's batch with the updated parameters
    t.step = 0;
    let after = t.train_step().unwrap();
    assert_eq!(before.batch_hash, after.batch_hash);
    assert!(after.total < before.total, "{} -> {}", before.total, after.total);
}

#[test]
fn distillation_alone_aligns_with_the_teacher() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    cfg.weights.sim = 0.0;
    cfg.train.epochs = 100;
    cfg.optimizer.lr = 3e-3;
    cfg.optimizer.schedule = Schedule::Constant;
    let art = cmd_train(&cfg, None, None).unwrap();
    let tail: Vec<f64> = art.records.iter().rev().take(10).map(|r| r.align).collect();
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(mean < 0.1, "final align loss {mean}");
}

#[test]
fn config_precedence_and_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.toml");
    std::fs::write(&path, "seed = 5\n[train]\nepochs = 3\n").unwrap();
    let cfg = ExperimentConfig::resolve(
        Some(&path),
        &Overrides {
            seed: Some(11),
            out_dir: Some(tmp.path().join("x")),
            ..Overrides::default()
        },
    )
    .unwrap();
    assert_eq!(cfg.seed, 11);
    assert_eq!(cfg.train.epochs, 3);
    assert_eq!(cfg.encoder, ExperimentConfig::default().encoder);
    let mut moved = cfg.clone();
    moved.out_dir = tmp.path().join("elsewhere");
    assert_eq!(cfg.hash(), moved.hash());
    moved.seed += 1;
    assert_ne!(cfg.hash(), moved.hash());

    std::fs::write(&path, "[train]\nepochs = \"many\"\n").unwrap();
    let err = ExperimentConfig::load(&path).unwrap_err().to_string();
    assert!(err.contains("c.toml"), "{err}");
}

#[test]
fn roc_csv_files_redraw_into_one_chart() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    cmd_eval(&cfg, None, None, &Protocol::ALL).unwrap();
    let eval = tmp.path().join("eval");
    let out = tmp.path().join("both.svg");
    cmd_plot_roc(&[eval.join("roc_identity.csv"), eval.join("roc_appearance.csv")], &out, "teacher").unwrap();
    let svg = std::fs::read_to_string(out).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
}
