use serde::{Deserialize, Serialize};

use super::FrameRecord;
use crate::error::{Error, Result};
use crate::imaging::RgbImage;

pub const HIST_BINS: (usize, usize, usize) = (8, 4, 4);

/// A contiguous frame range of one video, bounds inclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub video_id: String,
    pub shot_index: usize,
    pub start_frame: usize,
    pub end_frame: usize,
}

impl Shot {
    pub fn shot_id(&self) -> String {
        format!("{}/shot{:02}", self.video_id, self.shot_index)
    }

    pub fn contains(&self, frame_index: usize) -> bool {
        (self.start_frame..=self.end_frame).contains(&frame_index)
    }
}

/// `(h, s, v)` with all three in `[0, 1]`.
pub fn rgb_to_hsv(rgb: [f32; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb.map(|c| (c as f64).clamp(0.0, 1.0));
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn bin(x: f64, n: usize) -> usize {
    ((x * n as f64) as usize).min(n - 1)
}

/// L1-normalised joint HSV histogram with 8 x 4 x 4 bins, hue-major.
pub fn hsv_histogram(image: &RgbImage) -> Result<Vec<f64>> {
    if image.num_pixels() == 0 {
        return Err(Error::InvalidInput("histogram of an empty image".into()));
    }
    let (nh, ns, nv) = HIST_BINS;
    let mut counts = vec![0u64; nh * ns * nv];
    for p in image.pixels() {
        let (h, s, v) = rgb_to_hsv(p);
        counts[(bin(h, nh) * ns + bin(s, ns)) * nv + bin(v, nv)] += 1;
    }
    let total = image.num_pixels() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / total).collect())
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Splits each video into shots where the histogram distance between
/// consecutive frames exceeds `max(mean + k_sigma * std, floor)` of that
/// video's distances. `frames` must be grouped by video and ordered by frame
/// index; every frame needs a histogram.
pub fn detect_shots(frames: &[FrameRecord], k_sigma: f64, floor: f64) -> Result<Vec<Shot>> {
    let mut shots = Vec::new();
    for video in super::group_by_video(frames)? {
        let hists = video
            .iter()
            .map(|f| {
                f.histogram.as_deref().ok_or_else(|| {
                    Error::InvalidInput(format!("frame {}#{} has no histogram", f.video_id, f.frame_index))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dists: Vec<f64> = hists.windows(2).map(|w| l1_distance(w[0], w[1])).collect();
        let threshold = if dists.is_empty() {
            f64::INFINITY
        } else {
            let n = dists.len() as f64;
            let mean = dists.iter().sum::<f64>() / n;
            let var = dists.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
            (mean + k_sigma * var.sqrt()).max(floor)
        };
        let mut start = 0;
        let push = |lo: usize, hi: usize, shots: &mut Vec<Shot>| {
            shots.push(Shot {
                video_id: video[0].video_id.clone(),
                shot_index: shots.iter().filter(|s| s.video_id == video[0].video_id).count(),
                start_frame: video[lo].frame_index,
                end_frame: video[hi].frame_index,
            });
        };
        for (i, d) in dists.iter().enumerate() {
            if *d > threshold {
                push(start, i, &mut shots);
                start = i + 1;
            }
        }
        push(start, video.len() - 1, &mut shots);
    }
    Ok(shots)
}
