//! Synthetic multi-shot clips with ground-truth head/face detections, used to
//! exercise the dataset-construction pipeline where the truth is known.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::{render_head, value_noise_texture, AppearanceLook, IdentityLook, Photometric, Placement, View};
use super::FactorSpec;
use crate::error::{Error, Result};
use crate::imaging::{BBox, Mask, RgbImage};
use crate::seeding::{keyed_rng, mix, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VideoSpec {
    pub videos_per_identity: usize,
    pub shots_per_video: usize,
    pub min_frames_per_shot: usize,
    pub max_frames_per_shot: usize,
    pub frame_width: usize,
    /// Probability that a shot contains a second, unrelated person.
    pub second_person_prob: f64,
    /// Probability that a person keeps the face visible for the whole shot.
    pub all_visible_prob: f64,
    pub seed: u64,
}

impl Default for VideoSpec {
    fn default() -> Self {
        Self {
            videos_per_identity: 2,
            shots_per_video: 2,
            min_frames_per_shot: 12,
            max_frames_per_shot: 20,
            frame_width: 192,
            second_person_prob: 0.3,
            all_visible_prob: 0.1,
            seed: 0,
        }
    }
}

/// A head detection with the ground truth that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetection {
    pub head_box: BBox,
    pub face_box: Option<BBox>,
    pub gt_identity: usize,
    /// Globally unique appearance state, `identity * A + a`.
    pub gt_appearance: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoFrame {
    pub video_id: String,
    pub frame_index: usize,
    pub image: RgbImage,
    pub detections: Vec<FrameDetection>,
}

struct Actor {
    identity: usize,
    state: usize,
    x0: f64,
    velocity: f64,
    visible: Vec<bool>,
    turns: Vec<f64>,
}

fn visibility_pattern(rng: &mut impl Rng, n: usize, all_visible_prob: f64) -> (Vec<bool>, Vec<f64>) {
    let visible: Vec<bool> = if rng.random::<f64>() < all_visible_prob {
        vec![true; n]
    } else {
        let frac = rng.random_range(0.35..0.75);
        let k = ((frac * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
        let face_first = rng.random::<bool>();
        (0..n).map(|i| if face_first { i < k } else { i >= n - k }).collect()
    };
    let idx: Vec<usize> = (0..n).filter(|&i| visible[i]).collect();
    let mut turns = vec![0.0; n];
    if let (Some(&first), Some(&last)) = (idx.first(), idx.last()) {
        let mid = (first + last) as f64 / 2.0;
        let half = ((last - first) as f64 / 2.0).max(1.0);
        for &i in &idx {
            turns[i] = ((i as f64 - mid).abs() / half * 0.9).min(1.0);
        }
    }
    (visible, turns)
}

/// Renders `videos_per_identity` clips per identity of `world`.
pub fn generate_videos(world: &FactorSpec, spec: &VideoSpec) -> Result<Vec<VideoFrame>> {
    world.validate()?;
    if spec.min_frames_per_shot == 0 || spec.min_frames_per_shot > spec.max_frames_per_shot {
        return Err(Error::InvalidConfig("invalid frames-per-shot range".into()));
    }
    if spec.frame_width < world.image_size {
        return Err(Error::InvalidConfig("frame_width must be at least image_size".into()));
    }
    let size = world.image_size;
    let h = size;
    let w = spec.frame_width;
    let a_count = world.states_per_identity;
    let codes = world.identity_codes();
    let mut frames = Vec::new();

    for u in 0..world.num_identities {
        for v in 0..spec.videos_per_identity {
            let video_id = format!("vid{u:03}_{v:02}");
            let mut frame_index = 0usize;
            for s in 0..spec.shots_per_video {
                let mut rng = keyed_rng(&[spec.seed, stream::VIDEO, world.seed, u as u64, v as u64, s as u64]);
                let n = rng.random_range(spec.min_frames_per_shot..=spec.max_frames_per_shot);
                let bg_seed = mix(&[spec.seed, world.seed, u as u64, v as u64, s as u64, 0xBA]);
                let photo = Photometric {
                    gain: rng.random_range(0.9..1.1),
                    contrast: 1.0,
                };
                let main_state = (v * spec.shots_per_video + s) % a_count;
                let (vis, turns) = visibility_pattern(&mut rng, n, spec.all_visible_prob);
                let mut actors = vec![Actor {
                    identity: u,
                    state: main_state,
                    x0: rng.random_range(2.0..(w as f64 * 0.15)),
                    velocity: rng.random_range(-0.4..0.6),
                    visible: vis,
                    turns,
                }];
                if world.num_identities > 1 && rng.random::<f64>() < spec.second_person_prob && w >= 2 * size + 16 {
                    let mut other = rng.random_range(0..world.num_identities - 1);
                    if other >= u {
                        other += 1;
                    }
                    let (vis2, turns2) = visibility_pattern(&mut rng, n, spec.all_visible_prob);
                    actors.push(Actor {
                        identity: other,
                        state: rng.random_range(0..a_count),
                        x0: rng.random_range((w - size) as f64 - 0.12 * w as f64..(w - size) as f64 - 2.0),
                        velocity: rng.random_range(-0.5..0.3),
                        visible: vis2,
                        turns: turns2,
                    });
                }
                let background = value_noise_texture(w, h, bg_seed);
                let looks: Vec<(IdentityLook, AppearanceLook)> = actors
                    .iter()
                    .map(|a| {
                        (
                            IdentityLook::from_code(&codes[a.identity]),
                            AppearanceLook::draw(world.seed, a.identity, a.state),
                        )
                    })
                    .collect();
                for f in 0..n {
                    let mut image = background.clone();
                    let mut mask = Mask::new(w, h);
                    let mut detections = Vec::new();
                    for (actor, (id_look, app_look)) in actors.iter().zip(&looks) {
                        let x = (actor.x0 + actor.velocity * f as f64).clamp(0.0, (w - size) as f64);
                        let view = if actor.visible[f] {
                            View::Front { turn: actor.turns[f] }
                        } else {
                            View::Rear
                        };
                        let boxes = render_head(
                            &mut image,
                            &mut mask,
                            Placement {
                                cx: x + size as f64 / 2.0,
                                cy: 0.45 * size as f64,
                                size: size as f64,
                            },
                            id_look,
                            app_look,
                            view,
                            photo,
                        );
                        detections.push(FrameDetection {
                            head_box: boxes.head_box,
                            face_box: boxes.face_box,
                            gt_identity: actor.identity,
                            gt_appearance: actor.identity * a_count + actor.state,
                        });
                    }
                    frames.push(VideoFrame {
                        video_id: video_id.clone(),
                        frame_index,
                        image,
                        detections,
                    });
                    frame_index += 1;
                }
            }
        }
    }
    Ok(frames)
}
