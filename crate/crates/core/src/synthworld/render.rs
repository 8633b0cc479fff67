//! Procedural head renderer.
//!
//! Identity controls skin tone, head proportions, iris/lip/brow tone.
//! Appearance state controls the hair (colour, fringe, side coverage) and an
//! accessory. Nuisance controls illumination, contrast, shift and background.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::imaging::{BBox, Mask, RgbImage};
use crate::seeding::{keyed_rng, stream};

/// Dimension of the latent identity code that drives rendering and the oracle teacher.
pub const IDENTITY_CODE_DIM: usize = 8;

/// Leading code components that are visible from every viewpoint: skin
/// tone (3), head width and head height. The rest drive facial detail.
pub const HEAD_CODE_DIMS: usize = 5;

/// Latent identity code, standard normal per component.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityCode(pub [f64; IDENTITY_CODE_DIM]);

impl IdentityCode {
    pub fn draw(world_seed: u64, identity: usize) -> Self {
        let mut rng = keyed_rng(&[world_seed, stream::IDENTITY, identity as u64]);
        let mut c = [0.0; IDENTITY_CODE_DIM];
        for v in &mut c {
            let x: f64 = StandardNormal.sample(&mut rng);
            *v = x;
        }
        IdentityCode(c)
    }
}

/// Maps a raw code component to the `(-1, 1)` range the renderer uses.
#[inline]
pub fn squash(x: f64) -> f64 {
    (x / 1.5).tanh()
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32;
    let f = h6 - i as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i.rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// Identity-determined rendering parameters.
#[derive(Debug, Clone)]
pub struct IdentityLook {
    pub skin: [f32; 3],
    /// Head half-width as a fraction of the sprite size.
    pub rx: f64,
    /// Head half-height as a fraction of the sprite size.
    pub ry: f64,
    pub iris: [f32; 3],
    pub lips: [f32; 3],
    pub brow: [f32; 3],
}

impl IdentityLook {
    pub fn from_code(code: &IdentityCode) -> Self {
        let c = code.0.map(squash);
        let skin = [
            (0.62 + 0.22 * c[0]) as f32,
            (0.50 + 0.20 * c[1]) as f32,
            (0.42 + 0.20 * c[2]) as f32,
        ];
        let iris = lerp3([0.12, 0.30, 0.78], [0.55, 0.30, 0.06], ((c[5] + 1.0) / 2.0) as f32);
        let lips = [
            (0.62 + 0.28 * c[6]) as f32,
            (0.28 - 0.08 * c[6]) as f32,
            (0.32 - 0.12 * c[6]) as f32,
        ];
        let b = (0.30 + 0.25 * c[7]) as f32;
        Self {
            skin,
            rx: 0.25 + 0.045 * c[3],
            ry: 0.31 + 0.045 * c[4],
            iris,
            lips,
            brow: [b, b * 0.85, b * 0.7],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Accessory {
    None,
    Glasses([f32; 3]),
    Hat([f32; 3]),
    Headband([f32; 3]),
    Earrings([f32; 3]),
}

/// Appearance-state rendering parameters (hair and accessory).
#[derive(Debug, Clone)]
pub struct AppearanceLook {
    pub hair: [f32; 3],
    /// Fraction of the head height covered by the fringe, from the top.
    pub fringe: f64,
    /// Normalised vertical extent of side hair (v coordinate it reaches down to).
    pub side_extent: f64,
    /// Normalised width of side hair measured inwards from the head edge.
    pub side_width: f64,
    pub accessory: Accessory,
}

impl AppearanceLook {
    pub fn draw(world_seed: u64, identity: usize, appearance: usize) -> Self {
        let mut rng = keyed_rng(&[world_seed, stream::APPEARANCE, identity as u64, appearance as u64]);
        let hair = hsv_to_rgb(
            rng.random::<f64>(),
            rng.random_range(0.25..0.9),
            rng.random_range(0.12..0.9),
        );
        let fringe = rng.random_range(0.12..0.38);
        let side_extent = rng.random_range(-0.2..0.9);
        let side_width = rng.random_range(0.08..0.3);
        let acc_color = hsv_to_rgb(rng.random::<f64>(), rng.random_range(0.5..1.0), rng.random_range(0.4..1.0));
        let accessory = match rng.random_range(0..5u32) {
            0 => Accessory::None,
            1 => Accessory::Glasses(acc_color),
            2 => Accessory::Hat(acc_color),
            3 => Accessory::Headband(acc_color),
            _ => Accessory::Earrings(acc_color),
        };
        Self {
            hair,
            fringe,
            side_extent,
            side_width,
            accessory,
        }
    }
}

/// Which side of the head faces the camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum View {
    /// Face visible; `turn` in `[0, 1]` narrows the visible face (0 = frontal).
    Front { turn: f64 },
    /// Back of the head; the face is hidden.
    Rear,
}

/// Photometric nuisance applied to the foreground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Photometric {
    pub gain: f32,
    pub contrast: f32,
}

impl Default for Photometric {
    fn default() -> Self {
        Self {
            gain: 1.0,
            contrast: 1.0,
        }
    }
}

impl Photometric {
    #[inline]
    fn apply(&self, c: [f32; 3]) -> [f32; 3] {
        c.map(|v| ((0.5 + (v - 0.5) * self.contrast) * self.gain).clamp(0.0, 1.0))
    }
}

/// Geometry of one rendered head placement in canvas pixels.
#[derive(Debug, Clone, Copy)]
pub struct Placement {
    pub cx: f64,
    pub cy: f64,
    /// Sprite scale in pixels (the square sample size).
    pub size: f64,
}

/// Output boxes of a rendered head.
#[derive(Debug, Clone, Copy)]
pub struct RenderedBoxes {
    /// Detector-style head box: the head ellipse extended by any hat crown.
    pub head_box: BBox,
    pub face_box: Option<BBox>,
}

fn in_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let u = (x - cx) / rx;
    let v = (y - cy) / ry;
    u * u + v * v <= 1.0
}

/// Paints one head onto `canvas`, marking its foreground in `mask`.
pub fn render_head(
    canvas: &mut RgbImage,
    mask: &mut Mask,
    place: Placement,
    id: &IdentityLook,
    app: &AppearanceLook,
    view: View,
    photo: Photometric,
) -> RenderedBoxes {
    let rx = id.rx * place.size;
    let ry = id.ry * place.size;
    let (cx, cy) = (place.cx, place.cy);
    let turn = match view {
        View::Front { turn } => turn.clamp(0.0, 1.0),
        View::Rear => 0.0,
    };
    let face_half = 0.85 * (1.0 - 0.5 * turn);
    let face_shift = 0.35 * turn;
    let fringe_v = -1.0 + 2.0 * app.fringe;
    let has_hat = matches!(app.accessory, Accessory::Hat(_));

    let x_lo = (cx - 1.3 * rx).floor().max(0.0) as usize;
    let x_hi = ((cx + 1.3 * rx).ceil() as usize).min(canvas.width);
    let y_lo = (cy - 1.45 * ry).floor().max(0.0) as usize;
    let y_hi = canvas.height;

    for py in y_lo..y_hi {
        for px in x_lo..x_hi {
            let x = px as f64 + 0.5;
            let y = py as f64 + 0.5;
            let u = (x - cx) / rx;
            let v = (y - cy) / ry;
            let mut color: Option<[f32; 3]> = None;

            // neck
            if u.abs() <= 0.36 && (0.6..=1.9).contains(&v) {
                color = Some(id.skin.map(|c| c * 0.9));
            }
            // ears
            for side in [-1.0, 1.0] {
                if in_ellipse(u, v, side * 0.97, 0.05, 0.15, 0.22) {
                    color = Some(id.skin.map(|c| c * 0.95));
                }
            }
            if let Accessory::Earrings(c) = app.accessory {
                for side in [-1.0, 1.0] {
                    if (u - side * 0.97).abs() <= 0.07 && (0.3..=0.42).contains(&v) {
                        color = Some(c);
                    }
                }
            }
            // head
            if u * u + v * v <= 1.0 {
                let head_color = match view {
                    View::Rear => {
                        // crown whorl gives the back of the head a little structure
                        if in_ellipse(u, v, 0.0, -0.35, 0.18, 0.12) {
                            app.hair.map(|c| c * 0.75)
                        } else {
                            app.hair
                        }
                    }
                    View::Front { .. } => {
                        let fu = u - face_shift;
                        let in_face = fu.abs() <= face_half && v >= fringe_v;
                        let side_hair = u.abs() >= 1.0 - app.side_width && v <= app.side_extent;
                        if in_face && !side_hair {
                            facial_feature(fu, v, fringe_v, id).unwrap_or(id.skin)
                        } else {
                            app.hair
                        }
                    }
                };
                color = Some(head_color);
                match app.accessory {
                    Accessory::Headband(c) if (-0.66..=-0.52).contains(&v) => color = Some(c),
                    Accessory::Hat(c) if v <= -0.55 => color = Some(c),
                    Accessory::Glasses(c) if matches!(view, View::Front { .. }) => {
                        let fu = u - face_shift;
                        if v >= fringe_v && glasses_frame(fu, v) {
                            color = Some(c);
                        }
                    }
                    _ => {}
                }
            }
            if has_hat && in_ellipse(u, v, 0.0, -0.95, 1.08, 0.38) {
                if let Accessory::Hat(c) = app.accessory {
                    color = Some(c.map(|k| k * 0.85));
                }
            }

            if let Some(c) = color {
                canvas.set(px, py, photo.apply(c));
                mask.set(px, py, true);
            }
        }
    }

    let top = if has_hat { cy - 1.33 * ry } else { cy - ry };
    let head_box = BBox::new(cx - rx, top, cx + rx, cy + ry);
    let face_box = match view {
        View::Rear => None,
        View::Front { .. } => {
            let x0 = cx + (face_shift - face_half) * rx;
            let x1 = cx + (face_shift + face_half) * rx;
            let y0 = cy + fringe_v * ry;
            let y1 = cy + 0.95 * ry;
            Some(BBox::new(x0.max(cx - rx), y0, x1.min(cx + rx), y1))
        }
    };
    RenderedBoxes { head_box, face_box }
}

fn facial_feature(fu: f64, v: f64, fringe_v: f64, id: &IdentityLook) -> Option<[f32; 3]> {
    for side in [-1.0, 1.0] {
        let ex = side * 0.38;
        if v >= fringe_v && in_ellipse(fu, v, ex, -0.08, 0.16, 0.11) {
            return Some(id.iris);
        }
        if v >= fringe_v && (fu - ex).abs() <= 0.2 && (-0.34..=-0.24).contains(&v) {
            return Some(id.brow);
        }
    }
    if in_ellipse(fu, v, 0.0, 0.52, 0.34, 0.1) {
        return Some(id.lips);
    }
    None
}

fn glasses_frame(fu: f64, v: f64) -> bool {
    for side in [-1.0, 1.0] {
        let du = (fu - side * 0.38).abs();
        let dv = (v + 0.08).abs();
        let inside_outer = du <= 0.26 && dv <= 0.19;
        let inside_inner = du <= 0.19 && dv <= 0.13;
        if inside_outer && !inside_inner {
            return true;
        }
    }
    fu.abs() <= 0.12 && (v + 0.1).abs() <= 0.03
}

/// Seeded value-noise texture mixing two random colours.
pub fn value_noise_texture(width: usize, height: usize, seed: u64) -> RgbImage {
    let mut rng = keyed_rng(&[seed, stream::TEXTURE]);
    let c_a = hsv_to_rgb(rng.random(), rng.random_range(0.1..0.9), rng.random_range(0.1..0.95));
    let c_b = hsv_to_rgb(rng.random(), rng.random_range(0.1..0.9), rng.random_range(0.1..0.95));
    let octaves = [(8usize, 0.65f32), (4usize, 0.35f32)];
    let grids: Vec<(usize, usize, usize, f32, Vec<f32>)> = octaves
        .iter()
        .map(|&(cell, amp)| {
            let gw = width / cell + 2;
            let gh = height / cell + 2;
            let vals = (0..gw * gh).map(|_| rng.random::<f32>()).collect();
            (cell, gw, gh, amp, vals)
        })
        .collect();
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    let mut img = RgbImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let mut n = 0.0f32;
            for (cell, gw, _gh, amp, vals) in &grids {
                let fx = x as f32 / *cell as f32;
                let fy = y as f32 / *cell as f32;
                let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
                let (tx, ty) = (smooth(fx - ix as f32), smooth(fy - iy as f32));
                let g = |i: usize, j: usize| vals[j * gw + i];
                let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
                let bot = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
                n += amp * (top * (1.0 - ty) + bot * ty);
            }
            img.set(x, y, lerp3(c_a, c_b, n.clamp(0.0, 1.0)));
        }
    }
    img
}
