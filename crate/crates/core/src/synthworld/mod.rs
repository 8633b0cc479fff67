//! Deterministic synthetic head world.
//!
//! Each sample is rendered from three factor groups: the identity `u`
//! (through a latent [`IdentityCode`]), the appearance state `a` (hair and
//! accessories) and per-sample nuisance (illumination, contrast, shift,
//! background texture). Randomness is keyed by `(seed, indices)` so every
//! sample can be produced independently of the others.

mod render;
mod teacher;
mod video;

pub use render::{
    render_head, value_noise_texture, Accessory, AppearanceLook, IdentityCode, IdentityLook,
    Photometric, Placement, RenderedBoxes, View, HEAD_CODE_DIMS, IDENTITY_CODE_DIM,
};
pub use teacher::{FnTeacher, OracleTeacher, TeacherModel, DEFAULT_TEACHER_DIM};
pub use video::{generate_videos, FrameDetection, VideoFrame, VideoSpec};

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BBox, Mask, RgbImage};
use crate::manifest::SampleRecord;
use crate::seeding::{keyed_rng, mix, stream};

/// Number of nuisance channels the renderer knows about
/// (gain, shift x, shift y, background, contrast).
pub const MAX_NUISANCE_DIMS: usize = 5;

/// Generative controls of a synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactorSpec {
    pub num_identities: usize,
    pub states_per_identity: usize,
    pub samples_per_state: usize,
    pub image_size: usize,
    /// Active nuisance channels, in the order gain, shift x, shift y,
    /// background, contrast. Values above 5 behave as 5.
    pub nuisance_dims: usize,
    pub face_visible_fraction: f64,
    pub seed: u64,
}

impl Default for FactorSpec {
    fn default() -> Self {
        Self {
            num_identities: 40,
            states_per_identity: 4,
            samples_per_state: 20,
            image_size: 64,
            nuisance_dims: 4,
            face_visible_fraction: 0.6,
            seed: 0,
        }
    }
}

impl FactorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 {
            return Err(Error::InvalidConfig("num_identities must be positive".into()));
        }
        if self.states_per_identity == 0 {
            return Err(Error::InvalidConfig("states_per_identity must be positive".into()));
        }
        if self.samples_per_state == 0 {
            return Err(Error::InvalidConfig("samples_per_state must be positive".into()));
        }
        if self.image_size < 16 {
            return Err(Error::InvalidConfig("image_size must be at least 16".into()));
        }
        if !(0.0..=1.0).contains(&self.face_visible_fraction) {
            return Err(Error::InvalidConfig("face_visible_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.num_identities * self.states_per_identity * self.samples_per_state
    }

    pub fn identity_codes(&self) -> Vec<IdentityCode> {
        (0..self.num_identities)
            .map(|u| IdentityCode::draw(self.seed, u))
            .collect()
    }
}

/// A rendered head sample and its factor labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub sample_id: String,
    pub image: RgbImage,
    pub identity: usize,
    pub appearance: usize,
    pub nuisance_seed: u64,
    pub head_mask: Mask,
    pub face_visible: bool,
    pub face_box: Option<BBox>,
}

impl SynthSample {
    pub fn video_id(&self) -> String {
        world_video_id(self.identity, self.appearance)
    }

    pub fn segment_id(&self) -> String {
        format!("{}/s0", self.video_id())
    }

    pub fn image_rel_path(&self) -> String {
        format!("images/{}.png", self.sample_id)
    }

    pub fn mask_rel_path(&self) -> String {
        format!("masks/{}.png", self.sample_id)
    }

    pub fn record(&self) -> SampleRecord {
        SampleRecord {
            sample_id: self.sample_id.clone(),
            image_path: self.image_rel_path(),
            identity: self.identity,
            appearance: self.appearance,
            video_id: self.video_id(),
            segment_id: self.segment_id(),
            face_visible: self.face_visible,
            face_box: self.face_box,
            mask_path: Some(self.mask_rel_path()),
            nuisance_seed: self.nuisance_seed,
        }
    }
}

/// Each `(u, a)` state of the synthetic world is treated as its own clip.
pub fn world_video_id(identity: usize, appearance: usize) -> String {
    format!("u{identity:03}a{appearance:02}")
}

/// Nuisance factors decoded from a sample's nuisance seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nuisance {
    pub gain: f32,
    pub contrast: f32,
    pub dx: i32,
    pub dy: i32,
    pub texture_seed: u64,
}

impl Nuisance {
    pub fn decode(world_seed: u64, nuisance_seed: u64, dims: usize) -> Self {
        let mut rng = keyed_rng(&[nuisance_seed, stream::NUISANCE]);
        let mut e = [0.0f64; MAX_NUISANCE_DIMS];
        for v in e.iter_mut() {
            let x: f64 = StandardNormal.sample(&mut rng);
            *v = x.clamp(-2.5, 2.5);
        }
        let active = |k: usize| dims > k;
        Self {
            gain: if active(0) { (1.0 + 0.1 * e[0]) as f32 } else { 1.0 },
            dx: if active(1) { (1.2 * e[1]).round().clamp(-3.0, 3.0) as i32 } else { 0 },
            dy: if active(2) { (1.2 * e[2]).round().clamp(-3.0, 3.0) as i32 } else { 0 },
            texture_seed: if active(3) { mix(&[nuisance_seed, 0xB6]) } else { mix(&[world_seed, 0xB6]) },
            contrast: if active(4) { (1.0 + 0.08 * e[4]) as f32 } else { 1.0 },
        }
    }
}

/// Renders one sample of the world.
pub fn render_sample(spec: &FactorSpec, code: &IdentityCode, identity: usize, appearance: usize, index: usize) -> SynthSample {
    let s = spec.image_size;
    let nuisance_seed = mix(&[spec.seed, stream::NUISANCE, identity as u64, appearance as u64, index as u64]);
    let nz = Nuisance::decode(spec.seed, nuisance_seed, spec.nuisance_dims);
    let face_visible = {
        let mut rng = keyed_rng(&[nuisance_seed, stream::VISIBILITY]);
        rng.random::<f64>() < spec.face_visible_fraction
    };
    let id_look = IdentityLook::from_code(code);
    let app_look = AppearanceLook::draw(spec.seed, identity, appearance);

    let mut image = value_noise_texture(s, s, nz.texture_seed);
    let mut head_mask = Mask::new(s, s);
    let place = Placement {
        cx: s as f64 / 2.0 + nz.dx as f64,
        cy: 0.45 * s as f64 + nz.dy as f64,
        size: s as f64,
    };
    let view = if face_visible { View::Front { turn: 0.0 } } else { View::Rear };
    let boxes = render_head(
        &mut image,
        &mut head_mask,
        place,
        &id_look,
        &app_look,
        view,
        Photometric {
            gain: nz.gain,
            contrast: nz.contrast,
        },
    );
    SynthSample {
        sample_id: format!("u{identity:03}-a{appearance:02}-n{index:03}"),
        image,
        identity,
        appearance,
        nuisance_seed,
        head_mask,
        face_visible,
        face_box: boxes.face_box,
    }
}

/// Generates the full world: samples ordered by identity, state, index.
pub fn generate_world(spec: &FactorSpec) -> Result<(Vec<SynthSample>, Vec<SampleRecord>)> {
    spec.validate()?;
    let codes = spec.identity_codes();
    let mut samples = Vec::with_capacity(spec.total_samples());
    for (u, code) in codes.iter().enumerate() {
        for a in 0..spec.states_per_identity {
            for n in 0..spec.samples_per_state {
                samples.push(render_sample(spec, code, u, a, n));
            }
        }
    }
    let manifest = samples.iter().map(SynthSample::record).collect();
    Ok((samples, manifest))
}

/// Replaces every pixel outside the head mask with a seeded texture.
pub fn randomize_background(sample: &SynthSample, texture_seed: u64) -> SynthSample {
    let mut out = sample.clone();
    replace_background(&mut out.image, &sample.head_mask, texture_seed);
    out
}

/// In-place form of [`randomize_background`] over raw image and mask.
pub fn replace_background(image: &mut RgbImage, mask: &Mask, texture_seed: u64) {
    let tex = value_noise_texture(image.width, image.height, texture_seed);
    for y in 0..image.height {
        for x in 0..image.width {
            if !mask.get(x, y) {
                image.set(x, y, tex.get(x, y));
            }
        }
    }
}

/// Per-identity and per-state sample counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSummary {
    pub total_samples: usize,
    pub num_identities: usize,
    pub states_per_identity: usize,
    pub face_visible: usize,
    pub per_identity: BTreeMap<usize, usize>,
    pub per_state: BTreeMap<String, usize>,
}

pub fn summarize(records: &[SampleRecord]) -> WorldSummary {
    let mut per_identity = BTreeMap::new();
    let mut per_state = BTreeMap::new();
    for r in records {
        *per_identity.entry(r.identity).or_insert(0) += 1;
        *per_state
            .entry(format!("{}:{}", r.identity, r.appearance))
            .or_insert(0) += 1;
    }
    let states = records.iter().map(|r| r.appearance + 1).max().unwrap_or(0);
    WorldSummary {
        total_samples: records.len(),
        num_identities: per_identity.len(),
        states_per_identity: states,
        face_visible: records.iter().filter(|r| r.face_visible).count(),
        per_identity,
        per_state,
    }
}

/// Mean per-pixel RGB L2 distance over the union of both head masks.
pub fn masked_pixel_distance(a: &SynthSample, b: &SynthSample) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..a.image.height {
        for x in 0..a.image.width {
            if a.head_mask.get(x, y) || b.head_mask.get(x, y) {
                let pa = a.image.get(x, y);
                let pb = b.image.get(x, y);
                let d: f32 = (0..3).map(|c| (pa[c] - pb[c]).powi(2)).sum();
                sum += (d as f64).sqrt();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FactorSpec {
        FactorSpec {
            num_identities: 2,
            states_per_identity: 1,
            samples_per_state: 3,
            seed: 11,
            ..FactorSpec::default()
        }
    }

    #[test]
    fn counts_match_spec() {
        let (samples, manifest) = generate_world(&small()).unwrap();
        assert_eq!(samples.len(), 6);
        assert_eq!(manifest.len(), 6);
        let ids: std::collections::BTreeSet<_> = samples.iter().map(|s| s.identity).collect();
        assert_eq!(ids.len(), 2);
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, ma) = generate_world(&small()).unwrap();
        let (b, mb) = generate_world(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn rejects_empty_factors() {
        let mut s = small();
        s.num_identities = 0;
        assert!(generate_world(&s).is_err());
        let mut s = small();
        s.states_per_identity = 0;
        assert!(generate_world(&s).is_err());
    }

    #[test]
    fn sample_invariants() {
        let spec = FactorSpec {
            num_identities: 4,
            states_per_identity: 3,
            samples_per_state: 4,
            seed: 5,
            ..FactorSpec::default()
        };
        let (samples, _) = generate_world(&spec).unwrap();
        for s in &samples {
            assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.face_visible, s.face_box.is_some());
            if let Some(fb) = s.face_box {
                assert!(s.head_mask.bounding_box().unwrap().contains(&fb));
            }
        }
    }

    #[test]
    fn background_randomization_preserves_foreground() {
        let (samples, _) = generate_world(&small()).unwrap();
        let s = &samples[0];
        let a = randomize_background(s, 1);
        let b = randomize_background(s, 2);
        assert_eq!(a, randomize_background(s, 1));
        let mut outside_differs = false;
        for y in 0..s.image.height {
            for x in 0..s.image.width {
                if s.head_mask.get(x, y) {
                    assert_eq!(a.image.get(x, y), s.image.get(x, y));
                    assert_eq!(b.image.get(x, y), s.image.get(x, y));
                } else if a.image.get(x, y) != b.image.get(x, y) {
                    outside_differs = true;
                }
            }
        }
        assert!(outside_differs);
        assert_eq!(a.face_box, s.face_box);
        assert_eq!((a.identity, a.appearance), (s.identity, s.appearance));
    }

    #[test]
    fn changing_only_nuisance_keeps_labels() {
        let spec = small();
        let code = IdentityCode::draw(spec.seed, 1);
        let a = render_sample(&spec, &code, 1, 0, 0);
        let b = render_sample(&spec, &code, 1, 0, 1);
        assert_ne!(a.nuisance_seed, b.nuisance_seed);
        assert_eq!((a.identity, a.appearance), (b.identity, b.appearance));
    }
}
