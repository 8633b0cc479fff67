use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{checkpoint_name, Checkpoint, CheckpointHeader};
use super::config::{DistillGating, ExperimentConfig, RunStamp};
use super::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::model::{images_to_batch, Encoder};
use crate::objectives::{batch_objective, LossBreakdown, TeacherTargets};
use crate::optim::AdamW;
use crate::relations::{build_quadruplets, mixed_batch, BatchDescriptor, SampleMeta};
use crate::seeding::{keyed_rng, mix, stream};
use crate::synthworld::replace_background;

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub align: f64,
    pub sim_id: f64,
    pub sim_head: f64,
    pub total: f64,
    pub num_quadruplets: usize,
    pub num_align_pairs: usize,
    pub lr: f64,
    pub grad_norm: f64,
    /// Norm of the `g_id` gradient coming from the similarity loss alone.
    pub id_proj_sim_grad: f64,
    pub batch_hash: String,
}

/// Written next to the checkpoints when a step produces a non-finite loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NanDump {
    pub stamp: RunStamp,
    pub step: usize,
    pub batch: BatchDescriptor,
    pub head_sample_ids: Vec<String>,
    pub breakdown: LossBreakdown,
}

pub fn batch_hash(b: &BatchDescriptor) -> String {
    let json = serde_json::to_string(b).expect("descriptor serialises");
    hex::encode(&Sha256::digest(json.as_bytes())[..8])
}

/// Owns the model and optimizer; the batch stream is a pure function of the
/// master seed and the global step, so resuming continues it exactly.
pub struct Trainer<'a> {
    cfg: ExperimentConfig,
    data: &'a Dataset,
    metas: Vec<SampleMeta>,
    pub encoder: Encoder<f32>,
    pub optimizer: AdamW,
    pub step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &ExperimentConfig, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::<f32>::new(cfg.encoder.clone(), mix(&[cfg.seed, stream::INIT]))?;
        let optimizer = AdamW::new(cfg.optimizer.clone(), encoder.layout().decay_mask())?;
        Self::check_data(cfg, data)?;
        Ok(Self {
            cfg: cfg.clone(),
            metas: data.train_metas(),
            data,
            encoder,
            optimizer,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, data: &'a Dataset) -> Result<Self> {
        let cfg = ckpt.header.config.clone();
        let encoder = Encoder::from_params(ckpt.header.encoder.clone(), ckpt.params)?;
        let optimizer = AdamW::with_state(cfg.optimizer.clone(), encoder.layout().decay_mask(), ckpt.adam)?;
        Self::check_data(&cfg, data)?;
        Ok(Self {
            metas: data.train_metas(),
            cfg,
            data,
            encoder,
            optimizer,
            step: ckpt.header.step,
        })
    }

    fn check_data(cfg: &ExperimentConfig, data: &Dataset) -> Result<()> {
        if data.train_head.is_empty() {
            return Err(Error::Insufficient("no training head samples".into()));
        }
        if cfg.train.head_fraction < 1.0 && data.face.is_empty() {
            return Err(Error::Insufficient("head_fraction < 1 needs a face pool".into()));
        }
        Ok(())
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    /// Redirects diagnostics; the output directory is not part of the config hash.
    pub fn set_out_dir(&mut self, dir: &Path) {
        self.cfg.out_dir = dir.to_path_buf();
    }

    pub fn head_per_batch(&self) -> usize {
        ((self.cfg.train.head_fraction * self.cfg.train.batch_size as f64).ceil() as usize).min(self.cfg.train.batch_size)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.train_head.len().div_ceil(self.head_per_batch()).max(1)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.cfg.train.epochs
    }

    pub fn batch_for_step(&self, step: usize) -> Result<BatchDescriptor> {
        let mut rng = keyed_rng(&[self.cfg.seed, stream::BATCH, step as u64]);
        mixed_batch(
            &self.metas,
            self.data.face.len(),
            self.cfg.train.batch_size,
            self.cfg.train.head_fraction,
            self.cfg.train.sampler,
            &mut rng,
        )
    }

    fn batch_image(&self, sample: &Sample, step: usize, slot: usize) -> RgbImage {
        let mut img = sample.image.clone();
        if self.cfg.train.background_randomization {
            if let Some(mask) = &sample.mask {
                replace_background(&mut img, mask, mix(&[self.cfg.seed, stream::TEXTURE, step as u64, slot as u64]));
            }
        }
        img
    }

    /// Runs one optimizer step and returns its log record.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let desc = self.batch_for_step(step)?;
        let samples: Vec<&Sample> = desc
            .head
            .iter()
            .map(|&i| &self.data.train_head[i])
            .chain(desc.face.iter().map(|&i| &self.data.face[i]))
            .collect();
        let images: Vec<RgbImage> = samples
            .iter()
            .enumerate()
            .map(|(slot, s)| self.batch_image(s, step, slot))
            .collect();
        let refs: Vec<&RgbImage> = images.iter().collect();
        let x = images_to_batch::<f32>(&refs)?;
        let (emb, cache) = self.encoder.forward_train(x.view())?;

        let n_head = desc.head.len();
        let head_metas: Vec<SampleMeta> = desc.head.iter().map(|&i| self.metas[i].clone()).collect();
        let zh = emb.z_id.slice(s![..n_head, ..]);
        let sim = zh.dot(&zh.t());
        let mut mine_rng = keyed_rng(&[self.cfg.seed, stream::BATCH, step as u64, 1]);
        let quads = build_quadruplets(&head_metas, sim.view(), self.cfg.train.mining, &mut mine_rng)?;

        let targets: Vec<Option<Array1<f32>>> = samples
            .iter()
            .enumerate()
            .map(|(slot, s)| {
                let allowed = slot >= n_head || self.cfg.train.distill_gating == DistillGating::FaceVisible;
                if allowed && s.meta.face_visible {
                    s.teacher.clone()
                } else {
                    None
                }
            })
            .collect();
        let flagged: Vec<bool> = targets.iter().map(Option::is_some).collect();
        let out = batch_objective(
            emb.z_id.view(),
            emb.z_head.view(),
            &quads,
            &TeacherTargets {
                flagged: &flagged,
                targets: &targets,
            },
            self.cfg.encoder.variant,
            &self.cfg.margins,
            &self.cfg.weights,
        )?;
        let b = out.breakdown;
        if !b.total.is_finite() {
            self.dump_nan(step, &desc, &head_metas, b)?;
            return Err(Error::NonFinite(format!("loss at step {step}: {b:?}")));
        }
        let id_proj_sim_grad = self.encoder.id_projection_grad_norm(&cache, out.grad_id_sim.view()) as f64;
        let grads = self.encoder.backward(&cache, out.grad_id.view(), out.grad_head.view())?;
        let lr = self.cfg.optimizer.lr_at(step, self.total_steps());
        let grad_norm = self.optimizer.step(self.encoder.params_mut(), &grads, lr)?;
        self.step += 1;
        Ok(StepRecord {
            step,
            epoch: step / self.steps_per_epoch(),
            align: b.align,
            sim_id: b.sim_id,
            sim_head: b.sim_head,
            total: b.total,
            num_quadruplets: b.num_quadruplets,
            num_align_pairs: b.num_align_pairs,
            lr,
            grad_norm,
            id_proj_sim_grad,
            batch_hash: batch_hash(&desc),
        })
    }

    fn dump_nan(&self, step: usize, desc: &BatchDescriptor, metas: &[SampleMeta], b: LossBreakdown) -> Result<()> {
        let dump = NanDump {
            stamp: RunStamp::of(&self.cfg),
            step,
            batch: desc.clone(),
            head_sample_ids: metas.iter().map(|m| m.sample_id.clone()).collect(),
            breakdown: b,
        };
        log::error!("non-finite loss at step {step}; batch {desc:?}");
        let dir = &self.cfg.out_dir;
        if std::fs::create_dir_all(dir).is_ok() {
            crate::manifest::write_json(&dir.join("nan_dump.json"), &dump)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                stamp: RunStamp::of(&self.cfg),
                config: self.cfg.clone(),
                encoder: self.encoder.config().clone(),
                step: self.step,
                epoch: self.step / self.steps_per_epoch(),
                num_params: self.encoder.num_params(),
            },
            params: self.encoder.params().to_vec(),
            adam: self.optimizer.state.clone(),
        }
    }
}

/// Where a training run writes and how far it goes.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for checkpoints and the loss log; nothing is written if `None`.
    pub out_dir: Option<PathBuf>,
    /// Stop after this global step even if epochs remain.
    pub stop_at_step: Option<usize>,
}

pub const LOSS_LOG: &str = "loss_log.jsonl";

/// Trains until the configured number of epochs (or `stop_at_step`),
/// appending to the loss log and writing a checkpoint at each epoch end.
pub fn run_training(trainer: &mut Trainer<'_>, opts: &TrainOptions) -> Result<Vec<StepRecord>> {
    let total = trainer.total_steps();
    let stop = opts.stop_at_step.unwrap_or(total).min(total);
    let spe = trainer.steps_per_epoch();
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOSS_LOG);
            Some(open_log(&path, trainer.step)?)
        }
        None => None,
    };
    let mut records = Vec::new();
    while trainer.step < stop {
        let rec = trainer.train_step()?;
        if rec.step % 25 == 0 {
            log::info!(
                "step {}/{} epoch {} total {:.4} align {:.4} sim_id {:.4} sim_head {:.4}",
                rec.step,
                total,
                rec.epoch,
                rec.total,
                rec.align,
                rec.sim_id,
                rec.sim_head
            );
        }
        if let Some((path, f)) = &mut log_file {
            let line = serde_json::to_string(&rec).expect("record serialises");
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        records.push(rec);
        if trainer.step.is_multiple_of(spe) {
            if let Some(dir) = &opts.out_dir {
                let path = dir.join(checkpoint_name(trainer.step / spe));
                trainer.checkpoint().save(&path)?;
            }
        }
    }
    Ok(records)
}

/// Opens the loss log for appending, dropping any lines at or after `from_step`
/// so a resumed run rewrites exactly the steps it replays.
fn open_log(path: &Path, from_step: usize) -> Result<(PathBuf, std::fs::File)> {
    let mut kept = String::new();
    if from_step > 0 {
        if let Ok(text) = std::fs::read_to_string(path) {
            for line in text.lines() {
                let rec: StepRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    message: e.to_string(),
                })?;
                if rec.step < from_step {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))?;
    let f = std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok((path.to_path_buf(), f))
}
