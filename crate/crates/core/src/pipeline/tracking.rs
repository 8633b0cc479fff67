use serde::{Deserialize, Serialize};

use super::shots::Shot;
use super::FrameRecord;
use crate::error::{Error, Result};
use crate::imaging::BBox;

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return Err(Error::InvalidInput(format!("malformed box {a:?} or {b:?}")));
    }
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackFrame {
    pub frame_index: usize,
    pub detection_index: usize,
    pub head_box: BBox,
    pub face_box: Option<BBox>,
    /// Ground truth carried through for evaluation only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_identity: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_appearance: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSegment {
    pub segment_id: String,
    pub video_id: String,
    pub shot_id: String,
    pub frames: Vec<TrackFrame>,
    pub face_visible_count: usize,
}

impl TrackSegment {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

struct OpenTrack {
    id: usize,
    last_frame: usize,
    last_box: BBox,
    frames: Vec<TrackFrame>,
}

/// Greedy frame-to-frame IoU tracking inside one shot.
///
/// Each frame, every (open track, detection) pair with IoU at least
/// `iou_threshold` is a candidate; candidates are accepted one-to-one in
/// descending IoU, ties to the lower track id then lower detection index.
/// A track not extended for more than `max_gap` frames is closed.
pub fn track_heads(shot: &Shot, frames: &[&FrameRecord], iou_threshold: f64, max_gap: usize) -> Result<Vec<TrackSegment>> {
    let mut open: Vec<OpenTrack> = Vec::new();
    let mut closed: Vec<OpenTrack> = Vec::new();
    let mut next_id = 0;
    for f in frames {
        if f.video_id != shot.video_id || !shot.contains(f.frame_index) {
            return Err(Error::InvalidInput(format!(
                "frame {}#{} lies outside shot {}",
                f.video_id,
                f.frame_index,
                shot.shot_id()
            )));
        }
        let (still, stale): (Vec<_>, Vec<_>) = open
            .into_iter()
            .partition(|t| f.frame_index - t.last_frame <= max_gap);
        closed.extend(stale);
        open = still;

        let mut cands = Vec::new();
        for (ti, t) in open.iter().enumerate() {
            for (di, d) in f.detections.iter().enumerate() {
                let v = iou(&t.last_box, &d.head_box)?;
                if v >= iou_threshold {
                    cands.push((v, t.id, di, ti));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut track_used = vec![false; open.len()];
        let mut det_used = vec![false; f.detections.len()];
        for (_, _, di, ti) in cands {
            if track_used[ti] || det_used[di] {
                continue;
            }
            track_used[ti] = true;
            det_used[di] = true;
            let d = &f.detections[di];
            let t = &mut open[ti];
            t.last_frame = f.frame_index;
            t.last_box = d.head_box;
            t.frames.push(track_frame(f.frame_index, di, d));
        }
        for (di, d) in f.detections.iter().enumerate() {
            if !det_used[di] {
                open.push(OpenTrack {
                    id: next_id,
                    last_frame: f.frame_index,
                    last_box: d.head_box,
                    frames: vec![track_frame(f.frame_index, di, d)],
                });
                next_id += 1;
            }
        }
    }
    closed.extend(open);
    closed.sort_by_key(|t| t.id);
    let shot_id = shot.shot_id();
    Ok(closed
        .into_iter()
        .map(|t| TrackSegment {
            segment_id: format!("{shot_id}/t{:03}", t.id),
            video_id: shot.video_id.clone(),
            shot_id: shot_id.clone(),
            face_visible_count: t.frames.iter().filter(|x| x.face_box.is_some()).count(),
            frames: t.frames,
        })
        .collect())
}

fn track_frame(frame_index: usize, detection_index: usize, d: &super::DetectionRecord) -> TrackFrame {
    TrackFrame {
        frame_index,
        detection_index,
        head_box: d.head_box,
        face_box: d.face_box,
        gt_identity: d.gt_identity,
        gt_appearance: d.gt_appearance,
    }
}

/// Thresholds of the segment filter; all comparisons are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentFilter {
    pub min_frames: usize,
    pub min_face_frac: f64,
    pub min_nonface_frac: f64,
}

impl Default for SegmentFilter {
    fn default() -> Self {
        Self {
            min_frames: 5,
            min_face_frac: 0.20,
            min_nonface_frac: 0.10,
        }
    }
}

const FRAC_TOL: f64 = 1e-12;

impl SegmentFilter {
    pub fn keeps(&self, s: &TrackSegment) -> bool {
        let n = s.len();
        if n < self.min_frames || n == 0 {
            return false;
        }
        let face = s.face_visible_count as f64 / n as f64;
        let nonface = (n - s.face_visible_count) as f64 / n as f64;
        face + FRAC_TOL >= self.min_face_frac && nonface + FRAC_TOL >= self.min_nonface_frac
    }
}

pub fn filter_segments(segments: &[TrackSegment], filter: &SegmentFilter) -> Vec<TrackSegment> {
    segments.iter().filter(|s| filter.keeps(s)).cloned().collect()
}

/// Frame whose face box covers more than `min_ratio` of the head box, with the
/// largest face area; ties to the earliest frame.
pub fn select_best_face(segment: &TrackSegment, min_ratio: f64) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for f in &segment.frames {
        let Some(face) = f.face_box else { continue };
        let head = f.head_box.area();
        if head <= 0.0 || face.area() / head <= min_ratio {
            continue;
        }
        let better = match best {
            None => true,
            Some((a, idx)) => face.area() > a || (face.area() == a && f.frame_index < idx),
        };
        if better {
            best = Some((face.area(), f.frame_index));
        }
    }
    best.map(|(_, i)| i)
}
