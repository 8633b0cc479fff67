use std::path::Path;

use ndarray::{Array1, Array2};

use super::config::{ExperimentConfig, FacePoolSpec};
use crate::error::{Error, Result};
use crate::imaging::{Mask, RgbImage};
use crate::manifest::{read_jsonl, SampleRecord};
use crate::model::{images_to_batch, Encoder};
use crate::relations::SampleMeta;
use crate::synthworld::{generate_world, FactorSpec, OracleTeacher, SynthSample};

/// An image with its weak labels, mask and (when available) teacher target.
#[derive(Debug, Clone)]
pub struct Sample {
    pub meta: SampleMeta,
    pub image: RgbImage,
    pub mask: Option<Mask>,
    pub teacher: Option<Array1<f32>>,
}

/// Training head pool, held-out evaluation pool and distillation face pool.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train_head: Vec<Sample>,
    pub held_out: Vec<Sample>,
    pub face: Vec<Sample>,
}

impl Dataset {
    pub fn train_metas(&self) -> Vec<SampleMeta> {
        self.train_head.iter().map(|s| s.meta.clone()).collect()
    }

    pub fn held_out_metas(&self) -> Vec<SampleMeta> {
        self.held_out.iter().map(|s| s.meta.clone()).collect()
    }

    /// Renders the world and face pool described by `cfg` in memory.
    pub fn synthesize(cfg: &ExperimentConfig) -> Result<Self> {
        let (samples, records) = generate_world(&cfg.world)?;
        let pairs: Vec<(SampleRecord, RgbImage, Option<Mask>)> = samples
            .into_iter()
            .zip(records)
            .map(|(s, r)| (r, s.image, Some(s.head_mask)))
            .collect();
        Self::assemble(cfg, pairs)
    }

    /// Loads a world manifest written by the synth command; image and mask
    /// paths are relative to the manifest's directory.
    pub fn from_manifest(cfg: &ExperimentConfig, manifest: &Path) -> Result<Self> {
        let base = manifest.parent().unwrap_or_else(|| Path::new("."));
        let records: Vec<SampleRecord> = read_jsonl(manifest)?;
        if records.is_empty() {
            return Err(Error::Insufficient(format!("manifest {} is empty", manifest.display())));
        }
        let mut pairs = Vec::with_capacity(records.len());
        for r in records {
            let image = RgbImage::load_png(&base.join(&r.image_path))?;
            let mask = match &r.mask_path {
                Some(p) => Some(Mask::load_png(&base.join(p))?),
                None => None,
            };
            pairs.push((r, image, mask));
        }
        Self::assemble(cfg, pairs)
    }

    fn assemble(cfg: &ExperimentConfig, pairs: Vec<(SampleRecord, RgbImage, Option<Mask>)>) -> Result<Self> {
        let teacher = world_teacher(cfg);
        let records: Vec<SampleRecord> = pairs.iter().map(|(r, _, _)| r.clone()).collect();
        let metas = SampleMeta::from_records(&records);
        let cutoff = cfg.world.num_identities - cfg.train.held_out_identities;
        let mut train_head = Vec::new();
        let mut held_out = Vec::new();
        for ((r, image, mask), meta) in pairs.into_iter().zip(metas) {
            if image.width != cfg.encoder.image_size || image.height != cfg.encoder.image_size {
                return Err(Error::ShapeMismatch(format!(
                    "sample {} is {}x{}, encoder expects {}",
                    r.sample_id, image.width, image.height, cfg.encoder.image_size
                )));
            }
            let target = if r.face_visible {
                Some(to_f32(&teacher.embed(r.identity)?))
            } else {
                None
            };
            let sample = Sample {
                meta,
                image,
                mask,
                teacher: target,
            };
            if r.identity >= cutoff {
                held_out.push(sample);
            } else {
                train_head.push(sample);
            }
        }
        let face = face_pool(cfg)?;
        Ok(Self {
            train_head,
            held_out,
            face,
        })
    }
}

fn to_f32(v: &[f64]) -> Array1<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Teacher over the world's identities, in the encoder's embedding dimension.
pub fn world_teacher(cfg: &ExperimentConfig) -> OracleTeacher {
    OracleTeacher::new(&cfg.world, cfg.encoder.embed_dim, cfg.teacher_seed)
}

fn face_pool_world(cfg: &ExperimentConfig, fp: &FacePoolSpec) -> FactorSpec {
    FactorSpec {
        num_identities: fp.num_identities,
        states_per_identity: fp.samples_per_identity,
        samples_per_state: 1,
        image_size: cfg.world.image_size,
        nuisance_dims: cfg.world.nuisance_dims,
        face_visible_fraction: 1.0,
        seed: fp.seed,
    }
}

/// Face-visible renders of a disjoint population, each in its own appearance
/// state, with teacher targets from the shared lift.
pub fn face_pool(cfg: &ExperimentConfig) -> Result<Vec<Sample>> {
    let fp = &cfg.face_pool;
    if fp.num_identities == 0 || fp.samples_per_identity == 0 {
        return Ok(Vec::new());
    }
    let spec = face_pool_world(cfg, fp);
    let (samples, _) = generate_world(&spec)?;
    let teacher = OracleTeacher::new(&spec, cfg.encoder.embed_dim, cfg.teacher_seed);
    samples
        .into_iter()
        .map(|s: SynthSample| {
            Ok(Sample {
                meta: SampleMeta {
                    sample_id: format!("face-{}", s.sample_id),
                    identity: s.identity,
                    appearance: s.identity * spec.states_per_identity + s.appearance,
                    video_id: s.video_id(),
                    face_visible: true,
                },
                teacher: Some(to_f32(&teacher.embed(s.identity)?)),
                image: s.image,
                mask: Some(s.head_mask),
            })
        })
        .collect()
}

/// Identity embeddings (`z_id`) of `samples`, computed in fixed-size chunks
/// and concatenated in order. The head projection is never evaluated.
pub fn embed_samples(encoder: &Encoder<f32>, samples: &[Sample]) -> Result<Array2<f64>> {
    const CHUNK: usize = 64;
    let d = encoder.config().embed_dim;
    let mut out = Array2::<f64>::zeros((samples.len(), d));
    for (c, chunk) in samples.chunks(CHUNK).enumerate() {
        let refs: Vec<&RgbImage> = chunk.iter().map(|s| &s.image).collect();
        let x = images_to_batch::<f32>(&refs)?;
        let (z, trace) = encoder.embed_identity(x.view())?;
        if trace.head_projection_used {
            return Err(Error::InvalidInput("evaluation touched the head projection".into()));
        }
        for (i, row) in z.rows().into_iter().enumerate() {
            let mut dst = out.row_mut(c * CHUNK + i);
            for (k, &v) in row.iter().enumerate() {
                dst[k] = v as f64;
            }
            let n = dst.dot(&dst).sqrt();
            if n > 0.0 {
                dst /= n;
            }
        }
    }
    Ok(out)
}
