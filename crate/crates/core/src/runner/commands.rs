use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::config::{ExperimentConfig, RunStamp};
use super::data::{embed_samples, world_teacher, Dataset};
use super::eval::{evaluate_embeddings, EvalReport};
use super::plot::roc_svg;
use super::train::{run_training, StepRecord, TrainOptions, Trainer};
use crate::error::{Error, Result};
use crate::manifest::{read_jsonl, write_json, write_jsonl};
use crate::metrics::{far_key, Protocol, RocResult, FAR_TARGETS};
use crate::model::Variant;
use crate::pipeline::{relation_agreement, run_pipeline, FrameRecord, NoisyOracleEmbedder, StageCounts};
use crate::synthworld::{generate_videos, generate_world, summarize, OracleTeacher, WorldSummary, DEFAULT_TEACHER_DIM};

pub const WORLD_DIR: &str = "world";
pub const VIDEO_DIR: &str = "videos";
pub const MANIFEST: &str = "manifest.jsonl";
pub const FRAMES_MANIFEST: &str = "frames.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_text(&dir.join("config.toml"), &cfg.to_toml_string()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub stamp: RunStamp,
    pub world: WorldSummary,
    pub num_videos: usize,
    pub num_frames: usize,
}

#[derive(Debug, Clone)]
pub struct SynthArtifacts {
    pub manifest: PathBuf,
    pub frames_manifest: PathBuf,
    pub report: SynthReport,
}

/// Renders the world and the synthetic clips to `out_dir`: sample images,
/// masks and manifest under `world/`, frame images and the detection
/// manifest under `videos/`.
pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<SynthArtifacts> {
    cfg.validate()?;
    let root = &cfg.out_dir;
    let world_dir = root.join(WORLD_DIR);
    create_dir(&world_dir.join("images"))?;
    create_dir(&world_dir.join("masks"))?;
    let (samples, records) = generate_world(&cfg.world)?;
    for (s, r) in samples.iter().zip(&records) {
        s.image.save_png(&world_dir.join(&r.image_path))?;
        if let Some(m) = &r.mask_path {
            s.head_mask.save_png(&world_dir.join(m))?;
        }
    }
    let manifest = world_dir.join(MANIFEST);
    write_jsonl(&manifest, &records)?;

    let video_dir = root.join(VIDEO_DIR);
    create_dir(&video_dir.join("frames"))?;
    let frames = generate_videos(&cfg.world, &cfg.video)?;
    let mut frame_records = Vec::with_capacity(frames.len());
    for f in &frames {
        let rel = format!("frames/{}_{:04}.png", f.video_id, f.frame_index);
        f.image.save_png(&video_dir.join(&rel))?;
        let mut rec = FrameRecord::from_video_frame(f, Some(rel))?;
        // recomputed from the stored image by the pipeline
        rec.histogram = None;
        frame_records.push(rec);
    }
    let frames_manifest = video_dir.join(FRAMES_MANIFEST);
    write_jsonl(&frames_manifest, &frame_records)?;

    let report = SynthReport {
        stamp: RunStamp::of(cfg),
        world: summarize(&records),
        num_videos: frame_records
            .iter()
            .map(|f| f.video_id.as_str())
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
        num_frames: frame_records.len(),
    };
    write_json(&world_dir.join("summary.json"), &report)?;
    write_config(root, cfg)?;
    log::info!(
        "wrote {} samples and {} frames to {}",
        report.world.total_samples,
        report.num_frames,
        root.display()
    );
    Ok(SynthArtifacts {
        manifest,
        frames_manifest,
        report,
    })
}

/// Last pipeline stage whose artifacts are written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStage {
    Shots,
    Tracks,
    Filter,
    Cluster,
    Relations,
}

impl std::str::FromStr for PipelineStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shots" => Ok(Self::Shots),
            "tracks" => Ok(Self::Tracks),
            "filter" => Ok(Self::Filter),
            "cluster" => Ok(Self::Cluster),
            "relations" => Ok(Self::Relations),
            other => Err(Error::InvalidConfig(format!(
                "unknown stage {other:?}; expected shots, tracks, filter, cluster or relations"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stamp: RunStamp,
    pub stage: PipelineStage,
    pub counts: StageCounts,
    /// Pairwise agreement of induced and ground-truth relations, when the
    /// detections carry ground truth.
    pub relation_agreement: Option<f64>,
}

/// Runs dataset construction over a frame manifest and writes the stage
/// outputs up to `stage` under `out_dir/pipeline`.
pub fn cmd_pipeline(cfg: &ExperimentConfig, frames_manifest: &Path, stage: PipelineStage) -> Result<PipelineReport> {
    cfg.validate()?;
    let base = frames_manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut frames: Vec<FrameRecord> = read_jsonl(frames_manifest)?;
    for f in &mut frames {
        f.ensure_histogram(base)?;
    }
    let teacher = OracleTeacher::identity_pure(cfg.world.num_identities, DEFAULT_TEACHER_DIM, cfg.teacher_seed);
    let embedder = NoisyOracleEmbedder {
        teacher: &teacher,
        noise: cfg.pipeline.embed_noise,
        seed: cfg.seed,
    };
    let out = run_pipeline(&frames, &embedder, &cfg.pipeline)?;

    let dir = cfg.out_dir.join("pipeline");
    create_dir(&dir)?;
    write_jsonl(&dir.join("shots.jsonl"), &out.shots)?;
    if stage >= PipelineStage::Tracks {
        write_jsonl(&dir.join("tracks.jsonl"), &out.tracked)?;
    }
    if stage >= PipelineStage::Filter {
        write_jsonl(&dir.join("segments.jsonl"), &out.segments)?;
    }
    let agreement = if stage >= PipelineStage::Relations {
        write_jsonl(&dir.join("samples.jsonl"), &out.samples)?;
        if out.truth.iter().any(Option::is_some) {
            Some(relation_agreement(&out.samples, &out.truth)?)
        } else {
            None
        }
    } else {
        None
    };
    let report = PipelineReport {
        stamp: RunStamp::of(cfg),
        stage,
        counts: out.counts,
        relation_agreement: agreement,
    };
    write_json(&dir.join("report.json"), &report)?;
    log::info!("pipeline counts {:?}", report.counts);
    Ok(report)
}

fn load_dataset(cfg: &ExperimentConfig, manifest: Option<&Path>) -> Result<Dataset> {
    match manifest {
        Some(m) => Dataset::from_manifest(cfg, m),
        None => Dataset::synthesize(cfg),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stamp: RunStamp,
    pub variant: Variant,
    pub num_params: usize,
    pub steps: usize,
    pub steps_per_epoch: usize,
    pub resumed_from_step: usize,
    pub last: Option<StepRecord>,
}

pub struct TrainArtifacts {
    pub dir: PathBuf,
    pub summary: TrainSummary,
    pub records: Vec<StepRecord>,
    pub final_checkpoint: PathBuf,
}

/// Trains on the manifest (or the in-memory world when `manifest` is `None`)
/// and writes checkpoints and the loss log to `out_dir/train`. With `resume`,
/// continues from that checkpoint, whose config must hash equal to `cfg`.
pub fn cmd_train(cfg: &ExperimentConfig, manifest: Option<&Path>, resume: Option<&Path>) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let data = load_dataset(cfg, manifest)?;
    let dir = cfg.out_dir.join("train");
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.header.stamp.config_hash != cfg.hash() {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint {} was written by config {}, current config is {}",
                    p.display(),
                    ckpt.header.stamp.config_hash,
                    cfg.hash()
                )));
            }
            let mut t = Trainer::from_checkpoint(ckpt, &data)?;
            t.set_out_dir(&cfg.out_dir);
            t
        }
        None => Trainer::new(cfg, &data)?,
    };
    let resumed_from_step = trainer.step;
    create_dir(&dir)?;
    write_config(&dir, cfg)?;
    let records = run_training(
        &mut trainer,
        &TrainOptions {
            out_dir: Some(dir.clone()),
            stop_at_step: None,
        },
    )?;
    let final_checkpoint = dir.join("checkpoint_final.bin");
    trainer.checkpoint().save(&final_checkpoint)?;
    let summary = TrainSummary {
        stamp: RunStamp::of(cfg),
        variant: cfg.encoder.variant,
        num_params: trainer.encoder.num_params(),
        steps: trainer.step,
        steps_per_epoch: trainer.steps_per_epoch(),
        resumed_from_step,
        last: records.last().cloned(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(TrainArtifacts {
        dir,
        summary,
        records,
        final_checkpoint,
    })
}

/// Metric report plus the ROC curves it summarises.
pub struct EvalArtifacts {
    pub report: EvalReport,
    pub rocs: BTreeMap<Protocol, RocResult>,
}

/// Writes `report.json`, `roc_<protocol>.csv` and `roc_<protocol>.svg` to `dir`.
pub fn write_eval(dir: &Path, report: &EvalReport, rocs: &BTreeMap<Protocol, RocResult>) -> Result<()> {
    create_dir(dir)?;
    write_json(&dir.join("report.json"), report)?;
    for (p, r) in rocs {
        r.write_csv(&dir.join(format!("roc_{p}.csv")))?;
        let svg = roc_svg(&format!("{} protocol", p), &[(report.source.clone(), r.points.clone())]);
        write_text(&dir.join(format!("roc_{p}.svg")), &svg)?;
    }
    Ok(())
}

/// Evaluates `z_id` of a checkpoint on the held-out identities, or the oracle
/// teacher's embeddings when no checkpoint is given. The checkpoint's own
/// config decides the world and encoder; `cfg` supplies the output
/// directory and the evaluation settings.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    manifest: Option<&Path>,
    protocols: &[Protocol],
) -> Result<EvalArtifacts> {
    if protocols.is_empty() {
        return Err(Error::InvalidInput("at least one protocol is required".into()));
    }
    let (run_cfg, ckpt) = match checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let mut c = ckpt.header.config.clone();
            c.out_dir = cfg.out_dir.clone();
            c.eval = cfg.eval.clone();
            (c, Some(ckpt))
        }
        None => (cfg.clone(), None),
    };
    run_cfg.validate()?;
    let data = load_dataset(&run_cfg, manifest)?;
    if data.held_out.is_empty() {
        return Err(Error::Insufficient("no held-out samples to evaluate".into()));
    }
    let (emb, source) = match ckpt {
        Some(ck) => {
            let source = format!("checkpoint:{}@step{}", ck.header.encoder.variant.as_str(), ck.header.step);
            let enc = crate::model::Encoder::from_params(ck.header.encoder.clone(), ck.params)?;
            (embed_samples(&enc, &data.held_out)?, source)
        }
        None => {
            let teacher = world_teacher(&run_cfg);
            let d = run_cfg.encoder.embed_dim;
            let mut emb = Array2::<f64>::zeros((data.held_out.len(), d));
            for (i, s) in data.held_out.iter().enumerate() {
                let t = teacher.embed(s.meta.identity)?;
                emb.row_mut(i).iter_mut().zip(t).for_each(|(dst, v)| *dst = v);
            }
            (emb, "oracle_teacher".to_string())
        }
    };
    let (report, rocs) = evaluate_embeddings(
        &data.held_out,
        emb.view(),
        protocols,
        &run_cfg.eval,
        RunStamp::of(&run_cfg),
        &source,
    )?;
    write_eval(&cfg.out_dir.join("eval"), &report, &rocs)?;
    Ok(EvalArtifacts { report, rocs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub model: String,
    pub num_cls: usize,
    pub loss_on_id: String,
    /// Identity-protocol verification rates keyed like the eval report.
    pub vr_at_far: BTreeMap<String, Option<f64>>,
    pub auc: f64,
    pub ordering_satisfaction: f64,
    pub gap_r1_r2: f64,
    pub gap_r2_r3: f64,
    pub teacher_alignment: Option<f64>,
    pub max_id_proj_sim_grad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub stamp: RunStamp,
    /// Digest of the per-step batch hashes every variant consumed.
    pub batch_stream: String,
    pub steps: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Model | #CLS | Loss on ID |");
        for t in FAR_TARGETS {
            s.push_str(&format!(" VR@FAR={t:.0e} |"));
        }
        s.push_str(" AUC | Ordering |\n|---|---|---|");
        s.push_str(&"---|".repeat(FAR_TARGETS.len() + 2));
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("| {} | {} | {} |", r.model, r.num_cls, r.loss_on_id));
            for t in FAR_TARGETS {
                match r.vr_at_far.get(&far_key(t)).copied().flatten() {
                    Some(v) => s.push_str(&format!(" {v:.3} |")),
                    None => s.push_str(" n/a |"),
                }
            }
            s.push_str(&format!(" {:.3} | {:.3} |\n", r.auc, r.ordering_satisfaction));
        }
        s
    }
}

fn stream_digest(records: &[StepRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.batch_hash.as_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Trains and evaluates the four variants on one batch stream and tabulates
/// the identity-protocol results. Fails if the variants saw different
/// batches or the split variant's identity projection received a
/// similarity gradient.
pub fn cmd_ablate(cfg: &ExperimentConfig, manifest: Option<&Path>) -> Result<AblationTable> {
    cfg.validate()?;
    let data = load_dataset(cfg, manifest)?;
    let root = cfg.out_dir.join("ablate");
    let mut rows = Vec::new();
    let mut reference: Option<Vec<String>> = None;
    let mut steps = 0;
    let mut digest = String::new();
    for v in Variant::ALL {
        let mut vcfg = cfg.clone();
        vcfg.encoder.variant = v;
        let dir = root.join(v.as_str());
        let mut trainer = Trainer::new(&vcfg, &data)?;
        let records = run_training(
            &mut trainer,
            &TrainOptions {
                out_dir: Some(dir.clone()),
                stop_at_step: None,
            },
        )?;
        let hashes: Vec<String> = records.iter().map(|r| r.batch_hash.clone()).collect();
        match &reference {
            None => {
                steps = records.len();
                digest = stream_digest(&records);
                reference = Some(hashes);
            }
            Some(h) if *h != hashes => {
                return Err(Error::InvalidInput(format!("variant {} consumed a different batch stream", v.as_str())));
            }
            Some(_) => {}
        }
        let max_grad = records.iter().map(|r| r.id_proj_sim_grad).fold(0.0, f64::max);
        if v == Variant::DualHeadSplit && max_grad != 0.0 {
            return Err(Error::InvalidInput(format!(
                "split variant's identity projection received a similarity gradient of norm {max_grad}"
            )));
        }
        let emb = embed_samples(&trainer.encoder, &data.held_out)?;
        let (report, rocs) = evaluate_embeddings(
            &data.held_out,
            emb.view(),
            &[Protocol::Identity],
            &vcfg.eval,
            RunStamp::of(&vcfg),
            v.as_str(),
        )?;
        write_eval(&dir, &report, &rocs)?;
        let id = &report.protocols[Protocol::Identity.as_str()];
        rows.push(AblationRow {
            variant: v,
            model: v.display_name().to_string(),
            num_cls: v.num_cls(),
            loss_on_id: v.loss_on_id().to_string(),
            vr_at_far: id.vr_at_far.clone(),
            auc: id.auc,
            ordering_satisfaction: report.ordering_satisfaction,
            gap_r1_r2: report.gap_r1_r2,
            gap_r2_r3: report.gap_r2_r3,
            teacher_alignment: report.teacher_alignment,
            max_id_proj_sim_grad: max_grad,
        });
    }
    let table = AblationTable {
        stamp: RunStamp::of(cfg),
        batch_stream: digest,
        steps,
        rows,
    };
    write_json(&root.join("ablation.json"), &table)?;
    write_text(&root.join("ablation.md"), &table.to_markdown())?;
    Ok(table)
}

/// Redraws the ROC curves stored as CSV files into one SVG chart.
pub fn cmd_plot_roc(inputs: &[PathBuf], output: &Path, title: &str) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput("no ROC files given".into()));
    }
    let mut curves = Vec::new();
    for p in inputs {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let points = RocResult::points_from_csv(&text)?;
        let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        curves.push((label, points));
    }
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_text(output, &roc_svg(title, &curves))
}
