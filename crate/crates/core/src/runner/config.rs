use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::PairLimits;
use crate::model::{EncoderConfig, Variant};
use crate::objectives::{LossWeights, Margins};
use crate::optim::{OptimizerConfig, Schedule};
use crate::pipeline::PipelineConfig;
use crate::relations::{MiningOptions, SamplerShape};
use crate::synthworld::{FactorSpec, VideoSpec};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "HEADSIM_OUTPUT_ROOT";

/// A disjoint population of face-visible renders that only feeds distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FacePoolSpec {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub seed: u64,
}

impl Default for FacePoolSpec {
    fn default() -> Self {
        Self {
            num_identities: 200,
            samples_per_identity: 4,
            seed: 1_000_003,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillGating {
    /// Face-pool samples and face-visible head samples.
    FaceVisible,
    /// Face-pool samples only.
    FacePoolOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub num_triples: usize,
    pub pair_limits: PairLimits,
    pub topk: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_triples: 4000,
            pair_limits: PairLimits::default(),
            topk: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub head_fraction: f64,
    /// The last `held_out_identities` identities of the world are kept out of
    /// training and used for evaluation.
    pub held_out_identities: usize,
    pub background_randomization: bool,
    pub distill_gating: DistillGating,
    pub mining: MiningOptions,
    pub sampler: SamplerShape,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            head_fraction: 0.5,
            held_out_identities: 8,
            background_randomization: true,
            distill_gating: DistillGating::FaceVisible,
            mining: MiningOptions::default(),
            sampler: SamplerShape::default(),
        }
    }
}

/// Everything a run depends on. Loaded from TOML; every section and field is
/// optional and falls back to the desk defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed for initialisation and the batch stream.
    pub seed: u64,
    pub teacher_seed: u64,
    /// Output directory; not part of the config hash.
    pub out_dir: PathBuf,
    pub world: FactorSpec,
    pub face_pool: FacePoolSpec,
    pub encoder: EncoderConfig,
    pub margins: Margins,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub video: VideoSpec,
    pub pipeline: PipelineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            teacher_seed: 0,
            out_dir: default_out_dir(),
            world: FactorSpec::default(),
            face_pool: FacePoolSpec::default(),
            encoder: EncoderConfig {
                patch_size: 16,
                embed_dim: 64,
                ..EncoderConfig::default()
            },
            margins: Margins::default(),
            weights: LossWeights::default(),
            optimizer: OptimizerConfig {
                lr: 1e-3,
                warmup_steps: 50,
                grad_clip: 1.0,
                schedule: Schedule::Cosine,
                ..OptimizerConfig::default()
            },
            train: TrainConfig {
                epochs: 60,
                mining: MiningOptions {
                    hardest_positive: false,
                    ..MiningOptions::default()
                },
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            video: VideoSpec::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

fn default_out_dir() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub margins: Option<Margins>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    /// File (if any) then overrides, i.e. flags > file > defaults.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(v) = o.variant {
            self.encoder.variant = v;
        }
        if let Some(m) = o.margins {
            self.margins = m;
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(format!("cannot serialise config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.encoder.validate()?;
        self.margins.validate()?;
        self.optimizer.validate()?;
        self.pipeline.validate()?;
        if self.encoder.image_size != self.world.image_size {
            return Err(Error::InvalidConfig(format!(
                "encoder image_size {} differs from world image_size {}",
                self.encoder.image_size, self.world.image_size
            )));
        }
        let t = &self.train;
        if t.batch_size < 4 {
            return Err(Error::InvalidConfig("batch_size must be at least 4".into()));
        }
        if !(t.head_fraction > 0.0 && t.head_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!("head_fraction {} outside (0, 1]", t.head_fraction)));
        }
        if t.held_out_identities + 2 > self.world.num_identities {
            return Err(Error::InvalidConfig(format!(
                "holding out {} of {} identities leaves fewer than two for training",
                t.held_out_identities, self.world.num_identities
            )));
        }
        if t.sampler.states_per_identity == 0 || t.sampler.samples_per_state == 0 {
            return Err(Error::InvalidConfig("sampler shape must be positive".into()));
        }
        if self.eval.topk == 0 {
            return Err(Error::InvalidConfig("eval.topk must be positive".into()));
        }
        if !(self.weights.align >= 0.0 && self.weights.sim >= 0.0) {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Short hash of the canonical JSON form with `out_dir` cleared, so two
    /// runs that differ only in where they write share a hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            master: self.seed,
            world: self.world.seed,
            teacher: self.teacher_seed,
            face_pool: self.face_pool.seed,
            eval: self.eval.seed,
            video: self.video.seed,
        }
    }
}

/// Every seed a run depends on; embedded in all outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub world: u64,
    pub teacher: u64,
    pub face_pool: u64,
    pub eval: u64,
    pub video: u64,
}

/// Provenance block written into every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStamp {
    pub config_hash: String,
    pub seeds: Seeds,
}

impl RunStamp {
    pub fn of(cfg: &ExperimentConfig) -> Self {
        Self {
            config_hash: cfg.hash(),
            seeds: cfg.seeds(),
        }
    }
}
