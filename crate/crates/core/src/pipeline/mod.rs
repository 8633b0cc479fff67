//! Weak-supervision dataset construction from head-detection manifests:
//! shot segmentation, IoU tracking, segment filtering, best-face selection,
//! cross-video identity clustering and relation induction.

mod cluster;
mod shots;
mod tracking;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use cluster::cluster_identities;
pub use shots::{detect_shots, hsv_histogram, l1_distance, rgb_to_hsv, Shot, HIST_BINS};
pub use tracking::{filter_segments, iou, select_best_face, track_heads, SegmentFilter, TrackFrame, TrackSegment};

use crate::error::{Error, Result};
use crate::imaging::{BBox, RgbImage};
use crate::real::normalized;
use crate::relations::SampleMeta;
use crate::seeding::{keyed_rng, stream};
use crate::synthworld::{OracleTeacher, VideoFrame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub head_box: BBox,
    #[serde(default)]
    pub face_box: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_identity: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_appearance: Option<usize>,
}

/// One line of a frame/detection manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub video_id: String,
    pub frame_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<Vec<f64>>,
    pub detections: Vec<DetectionRecord>,
}

impl FrameRecord {
    /// Record of a synthetic frame with its histogram precomputed.
    pub fn from_video_frame(frame: &VideoFrame, image_path: Option<String>) -> Result<Self> {
        Ok(Self {
            video_id: frame.video_id.clone(),
            frame_index: frame.frame_index,
            image_path,
            histogram: Some(hsv_histogram(&frame.image)?),
            detections: frame
                .detections
                .iter()
                .map(|d| DetectionRecord {
                    head_box: d.head_box,
                    face_box: d.face_box,
                    gt_identity: Some(d.gt_identity),
                    gt_appearance: Some(d.gt_appearance),
                })
                .collect(),
        })
    }

    /// Fills a missing histogram from the frame image under `base`.
    pub fn ensure_histogram(&mut self, base: &Path) -> Result<()> {
        if self.histogram.is_some() {
            return Ok(());
        }
        let rel = self.image_path.as_ref().ok_or_else(|| {
            Error::InvalidInput(format!(
                "frame {}#{} has neither a histogram nor an image",
                self.video_id, self.frame_index
            ))
        })?;
        self.histogram = Some(hsv_histogram(&RgbImage::load_png(&base.join(rel))?)?);
        Ok(())
    }
}

/// Splits frames into per-video runs, checking frame order.
pub(crate) fn group_by_video(frames: &[FrameRecord]) -> Result<Vec<&[FrameRecord]>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=frames.len() {
        if i == frames.len() || frames[i].video_id != frames[start].video_id {
            let run = &frames[start..i];
            if run.windows(2).any(|w| w[1].frame_index <= w[0].frame_index) {
                return Err(Error::InvalidInput(format!(
                    "frame indices of video {} are not strictly increasing",
                    run[0].video_id
                )));
            }
            out.push(run);
            start = i;
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for run in &out {
        if !seen.insert(run[0].video_id.as_str()) {
            return Err(Error::InvalidInput(format!(
                "frames of video {} are not contiguous",
                run[0].video_id
            )));
        }
    }
    Ok(out)
}

/// Face embedding used for cross-video clustering.
pub trait FaceEmbedder {
    fn embed_face(&self, frame: &FrameRecord, detection_index: usize) -> Result<Vec<f64>>;
}

/// Oracle-teacher embedding of the detection's ground-truth identity plus
/// seeded isotropic noise, renormalised. Stands in for a face model.
pub struct NoisyOracleEmbedder<'a> {
    pub teacher: &'a OracleTeacher,
    pub noise: f64,
    pub seed: u64,
}

impl FaceEmbedder for NoisyOracleEmbedder<'_> {
    fn embed_face(&self, frame: &FrameRecord, detection_index: usize) -> Result<Vec<f64>> {
        let det = frame.detections.get(detection_index).ok_or(Error::IndexOutOfRange {
            index: detection_index,
            len: frame.detections.len(),
        })?;
        let u = det
            .gt_identity
            .ok_or_else(|| Error::InvalidInput("oracle face embedder needs ground-truth identities".into()))?;
        let mut v = self.teacher.embed(u)?;
        if self.noise > 0.0 {
            use rand_distr::{Distribution, Normal};
            let key = crate::seeding::mix(&[
                frame.video_id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3)),
                frame.frame_index as u64,
                detection_index as u64,
            ]);
            let mut rng = keyed_rng(&[self.seed, stream::EMBED_NOISE, key]);
            let normal = Normal::new(0.0, self.noise / (v.len() as f64).sqrt()).expect("positive std");
            for x in &mut v {
                *x += normal.sample(&mut rng);
            }
        }
        Ok(normalized(&v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub k_sigma: f64,
    pub shot_floor: f64,
    pub iou_threshold: f64,
    pub max_gap: usize,
    pub filter: SegmentFilter,
    pub best_face_ratio: f64,
    pub cluster_tau: f64,
    /// Every `frame_stride`-th frame of a kept segment becomes a sample.
    pub frame_stride: usize,
    /// Noise of the oracle face embedder used at desk scale.
    pub embed_noise: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k_sigma: 3.0,
            shot_floor: 0.2,
            iou_threshold: 0.5,
            max_gap: 1,
            filter: SegmentFilter::default(),
            best_face_ratio: 0.5,
            cluster_tau: 0.5,
            frame_stride: 1,
            embed_noise: 0.3,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_stride == 0 {
            return Err(Error::InvalidConfig("frame_stride must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::InvalidConfig("iou_threshold must lie in [0, 1]".into()));
        }
        if self.embed_noise < 0.0 || self.k_sigma < 0.0 {
            return Err(Error::InvalidConfig("embed_noise and k_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Output row of the segment manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub segment_id: String,
    pub video_id: String,
    pub shot_id: String,
    pub frames: Vec<usize>,
    pub num_frames: usize,
    pub face_visible_count: usize,
    pub best_face_frame: Option<usize>,
    pub cluster_id: Option<usize>,
}

/// Number of items surviving each stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub videos: usize,
    pub frames: usize,
    pub shots: usize,
    pub tracked_segments: usize,
    pub filtered_segments: usize,
    pub segments_with_best_face: usize,
    pub clusters: usize,
    pub samples: usize,
}

/// A segment after clustering, ready for relation induction.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredSegment {
    pub segment: TrackSegment,
    pub cluster_id: usize,
}

/// Turns clustered segments into sample metadata: identity is the cluster
/// id, appearance is the segment's position in `segments`.
pub fn induce_relations(segments: &[ClusteredSegment], frame_stride: usize) -> Vec<SampleMeta> {
    let stride = frame_stride.max(1);
    let mut out = Vec::new();
    for (k, cs) in segments.iter().enumerate() {
        for f in cs.segment.frames.iter().step_by(stride) {
            out.push(SampleMeta {
                sample_id: format!("{}/f{:05}", cs.segment.segment_id, f.frame_index),
                identity: cs.cluster_id,
                appearance: k,
                video_id: cs.segment.video_id.clone(),
                face_visible: f.face_box.is_some(),
            });
        }
    }
    out
}

/// Ground truth of an induced sample, when the manifest carried it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleTruth {
    pub identity: usize,
    pub appearance: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub shots: Vec<Shot>,
    pub tracked: Vec<TrackSegment>,
    pub segments: Vec<SegmentRecord>,
    pub samples: Vec<SampleMeta>,
    /// Aligned with `samples`; `None` where detections had no labels.
    pub truth: Vec<Option<SampleTruth>>,
    pub counts: StageCounts,
}

/// Runs every stage in order over a frame manifest.
pub fn run_pipeline(frames: &[FrameRecord], embedder: &dyn FaceEmbedder, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let videos = group_by_video(frames)?;
    let shots = detect_shots(frames, cfg.k_sigma, cfg.shot_floor)?;

    let mut tracked = Vec::new();
    for video in &videos {
        for shot in shots.iter().filter(|s| s.video_id == video[0].video_id) {
            let in_shot: Vec<&FrameRecord> = video.iter().filter(|f| shot.contains(f.frame_index)).collect();
            tracked.extend(track_heads(shot, &in_shot, cfg.iou_threshold, cfg.max_gap)?);
        }
    }
    let kept = filter_segments(&tracked, &cfg.filter);

    let lookup: BTreeMap<(&str, usize), &FrameRecord> =
        frames.iter().map(|f| ((f.video_id.as_str(), f.frame_index), f)).collect();
    let mut with_face = Vec::new();
    let mut embeddings = Vec::new();
    let mut records = Vec::new();
    for seg in &kept {
        let best = select_best_face(seg, cfg.best_face_ratio);
        match best {
            Some(frame_index) => {
                let tf = seg.frames.iter().find(|f| f.frame_index == frame_index).expect("best frame in segment");
                let frame = lookup[&(seg.video_id.as_str(), frame_index)];
                embeddings.push(embedder.embed_face(frame, tf.detection_index)?);
                with_face.push(seg.clone());
            }
            None => log::warn!("segment {} has no usable face frame; dropped", seg.segment_id),
        }
        records.push(SegmentRecord {
            segment_id: seg.segment_id.clone(),
            video_id: seg.video_id.clone(),
            shot_id: seg.shot_id.clone(),
            frames: seg.frames.iter().map(|f| f.frame_index).collect(),
            num_frames: seg.len(),
            face_visible_count: seg.face_visible_count,
            best_face_frame: best,
            cluster_id: None,
        });
    }
    let ids = cluster_identities(&embeddings, cfg.cluster_tau)?;
    let clustered: Vec<ClusteredSegment> = with_face
        .into_iter()
        .zip(&ids)
        .map(|(segment, &cluster_id)| ClusteredSegment { segment, cluster_id })
        .collect();
    for r in &mut records {
        r.cluster_id = clustered
            .iter()
            .find(|c| c.segment.segment_id == r.segment_id)
            .map(|c| c.cluster_id);
    }
    let samples = induce_relations(&clustered, cfg.frame_stride);
    let truth = clustered
        .iter()
        .flat_map(|cs| {
            cs.segment.frames.iter().step_by(cfg.frame_stride.max(1)).map(|f| match (f.gt_identity, f.gt_appearance) {
                (Some(identity), Some(appearance)) => Some(SampleTruth { identity, appearance }),
                _ => None,
            })
        })
        .collect();

    let counts = StageCounts {
        videos: videos.len(),
        frames: frames.len(),
        shots: shots.len(),
        tracked_segments: tracked.len(),
        filtered_segments: kept.len(),
        segments_with_best_face: clustered.len(),
        clusters: ids.iter().copied().max().map_or(0, |m| m + 1),
        samples: samples.len(),
    };
    Ok(PipelineOutput {
        shots,
        tracked,
        segments: records,
        samples,
        truth,
        counts,
    })
}

/// Fraction of sample pairs whose induced relation equals the ground-truth one.
pub fn relation_agreement(samples: &[SampleMeta], truth: &[Option<SampleTruth>]) -> Result<f64> {
    use crate::relations::{relation_of, Relation};
    if samples.len() != truth.len() {
        return Err(Error::ShapeMismatch("truth must align with samples".into()));
    }
    let (mut agree, mut total) = (0u64, 0u64);
    for i in 0..samples.len() {
        let Some(ti) = truth[i] else { continue };
        for j in i + 1..samples.len() {
            let Some(tj) = truth[j] else { continue };
            let gt = if ti.identity != tj.identity {
                Relation::R3
            } else if ti.appearance != tj.appearance {
                Relation::R2
            } else {
                Relation::R1
            };
            total += 1;
            if relation_of(&samples[i], &samples[j])? == gt {
                agree += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Insufficient("no labelled sample pairs".into()));
    }
    Ok(agree as f64 / total as f64)
}
