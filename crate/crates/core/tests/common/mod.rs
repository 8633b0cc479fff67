//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use headsim_core::metrics::ScoredPair;
use headsim_core::model::{Encoder, EncoderConfig, Variant};
use headsim_core::objectives::{batch_objective, LossWeights, Margins, TeacherTargets};
use headsim_core::imaging::BBox;
use headsim_core::relations::{build_quadruplets, MiningOptions, Quadruplet, SampleMeta};
use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `ln(1 + y)` for `y > 0` through the series `2 atanh(y / (2 + y))`.
pub fn ln1p_series(y: f64) -> f64 {
    let t = y / (2.0 + y);
    let t2 = t * t;
    let (mut term, mut sum, mut k) = (t, 0.0f64, 1.0f64);
    while term.abs() > 1e-20 {
        sum += term / k;
        term *= t2;
        k += 2.0;
    }
    2.0 * sum
}

/// `e^x` by Taylor series on `x / 2^s`, squared back up.
pub fn exp_series(x: f64) -> f64 {
    let s = 16;
    let r = x / f64::from(1u32 << s);
    let (mut term, mut sum, mut k) = (1.0f64, 1.0, 1.0);
    while term.abs() > 1e-22 {
        term *= r / k;
        sum += term;
        k += 1.0;
    }
    (0..s).fold(sum, |acc, _| acc * acc)
}

pub fn softplus_oracle(x: f64) -> f64 {
    if x > 0.0 {
        x + ln1p_series(exp_series(-x))
    } else {
        ln1p_series(exp_series(x))
    }
}

/// The hierarchical loss written out term by term.
pub fn sim_loss_oracle(s_ap: f64, s_an1: f64, s_an2: f64, m: (f64, f64, f64)) -> f64 {
    softplus_oracle(m.0 + s_an1 - s_ap) + softplus_oracle(m.1 + s_an2 - s_ap) + softplus_oracle(m.2 + s_an2 - s_an1)
}

/// Probability that a random positive outscores a random negative, ties counted half.
pub fn rank_statistic(pairs: &[ScoredPair]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for p in pairs.iter().filter(|p| p.label) {
        for n in pairs.iter().filter(|p| !p.label) {
            den += 1.0;
            if p.score > n.score {
                num += 1.0;
            } else if p.score == n.score {
                num += 0.5;
            }
        }
    }
    num / den
}

/// IoU by counting the unit cells of an integer grid covered by each box.
pub fn iou_by_cells(a: (i32, i32, i32, i32), b: (i32, i32, i32, i32)) -> f64 {
    let inside = |r: (i32, i32, i32, i32), x: i32, y: i32| x >= r.0 && x < r.2 && y >= r.1 && y < r.3;
    let (mut inter, mut union) = (0u32, 0u32);
    for y in a.1.min(b.1)..a.3.max(b.3) {
        for x in a.0.min(b.0)..a.2.max(b.2) {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += u32::from(ia && ib);
            union += u32::from(ia || ib);
        }
    }
    f64::from(inter) / f64::from(union)
}

pub fn bbox(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
    BBox { x0, y0, x1, y1 }
}

pub fn meta(i: usize, identity: usize, appearance: usize, face_visible: bool) -> SampleMeta {
    SampleMeta {
        sample_id: format!("s{i}"),
        identity,
        appearance,
        video_id: format!("v{identity}"),
        face_visible,
    }
}

pub fn tiny_config(variant: Variant) -> EncoderConfig {
    EncoderConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 16,
        depth: 1,
        num_heads: 2,
        variant,
        mlp_ratio: 2.0,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_embedding: f64,
    pub max_rel_param: f64,
    pub num_params: usize,
    pub num_quadruplets: usize,
    /// Parameter index, analytic and numeric value of the worst entry.
    pub worst_param: (usize, f64, f64),
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps entries that are zero
/// up to rounding from dominating.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

struct Problem {
    encoder: Encoder<f64>,
    images: Array4<f64>,
    quads: Vec<Quadruplet>,
    flagged: Vec<bool>,
    targets: Vec<Option<Array1<f64>>>,
    variant: Variant,
    margins: Margins,
    weights: LossWeights,
}

impl Problem {
    fn loss_of(&self, z_id: &Array2<f64>, z_head: &Array2<f64>) -> f64 {
        let teacher = TeacherTargets {
            flagged: &self.flagged,
            targets: &self.targets,
        };
        batch_objective(
            z_id.view(),
            z_head.view(),
            &self.quads,
            &teacher,
            self.variant,
            &self.margins,
            &self.weights,
        )
        .unwrap()
        .breakdown
        .total
    }

    fn loss_at(&self, enc: &Encoder<f64>) -> f64 {
        let (emb, _) = enc.forward_train(self.images.view()).unwrap();
        self.loss_of(&emb.z_id, &emb.z_head)
    }
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    let v = Array1::from_shape_fn(d, |_| rng.random::<f64>() * 2.0 - 1.0);
    let n = v.dot(&v).sqrt();
    v / n
}

fn random_problem(seed: u64, variant: Variant) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config(variant);
    let mut encoder = Encoder::<f64>::new(cfg.clone(), seed).unwrap();
    // widen the init so attention and GELU leave their near-linear regime
    for p in encoder.params_mut() {
        *p *= 10.0;
    }
    let b = 8;
    let s = cfg.image_size;
    let images = Array4::from_shape_fn((b, s, s, 3), |_| rng.random::<f64>() * 2.0 - 1.0);
    // three identities; identity 0 and 1 carry two appearance states each
    let layout = [(0, 0), (0, 0), (0, 1), (0, 1), (1, 2), (1, 2), (1, 3), (2, 4)];
    let metas: Vec<SampleMeta> = layout
        .iter()
        .enumerate()
        .map(|(i, &(u, a))| meta(i, u, a, rng.random_bool(0.6)))
        .collect();
    let (emb, _) = encoder.forward_train(images.view()).unwrap();
    let sim = emb.z_id.dot(&emb.z_id.t());
    let quads = build_quadruplets(&metas, sim.view(), MiningOptions::default(), &mut rng).unwrap();
    let flagged: Vec<bool> = metas.iter().map(|m| m.face_visible).collect();
    let targets = flagged
        .iter()
        .map(|&f| f.then(|| random_unit(&mut rng, cfg.embed_dim)))
        .collect();
    Problem {
        encoder,
        images,
        quads,
        flagged,
        targets,
        variant,
        margins: Margins::default(),
        weights: LossWeights {
            align: rng.random_range(0.5..2.0),
            sim: rng.random_range(0.5..2.0),
        },
    }
}

/// Five-point central difference, accurate to fourth order in `h`.
fn central(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    let (p1, m1, p2, m2) = (f(h), f(-h), f(2.0 * h), f(-2.0 * h));
    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
}

/// Analytic versus central-difference gradients for one random batch, with
/// respect to both embeddings and every model parameter.
pub fn gradient_check(seed: u64, variant: Variant) -> GradCheck {
    let p = random_problem(seed, variant);
    let (emb, cache) = p.encoder.forward_train(p.images.view()).unwrap();
    let teacher = TeacherTargets {
        flagged: &p.flagged,
        targets: &p.targets,
    };
    let out = batch_objective(
        emb.z_id.view(),
        emb.z_head.view(),
        &p.quads,
        &teacher,
        variant,
        &p.margins,
        &p.weights,
    )
    .unwrap();

    let h = 1e-4;
    let mut max_rel_embedding: f64 = 0.0;
    for (which, grad) in [(0, &out.grad_id), (1, &out.grad_head)] {
        if which == 1 && variant == Variant::Shared {
            // z_head is z_id here; its gradient is folded into grad_id
            continue;
        }
        for idx in ndarray::indices(grad.dim()) {
            let bump = |delta: f64| {
                let (mut zi, mut zh) = (emb.z_id.clone(), emb.z_head.clone());
                if which == 0 {
                    zi[idx] += delta;
                    if variant == Variant::Shared {
                        zh[idx] += delta;
                    }
                } else {
                    zh[idx] += delta;
                }
                p.loss_of(&zi, &zh)
            };
            let numeric = central(bump, h);
            max_rel_embedding = max_rel_embedding.max(rel_err(grad[idx], numeric));
        }
    }

    let analytic = p
        .encoder
        .backward(&cache, out.grad_id.view(), out.grad_head.view())
        .unwrap();
    let mut enc = p.encoder.clone();
    let mut max_rel_param: f64 = 0.0;
    let mut worst_param = (0, 0.0, 0.0);
    for i in 0..enc.num_params() {
        let orig = enc.params()[i];
        let numeric = central(
            |delta| {
                enc.params_mut()[i] = orig + delta;
                p.loss_at(&enc)
            },
            h,
        );
        enc.params_mut()[i] = orig;
        let e = rel_err(analytic[i], numeric);
        if e > max_rel_param {
            max_rel_param = e;
            worst_param = (i, analytic[i], numeric);
        }
    }
    GradCheck {
        max_rel_embedding,
        max_rel_param,
        num_params: enc.num_params(),
        num_quadruplets: p.quads.len(),
        worst_param,
    }
}

/// Runs the gradient check over `batches` seeds, cycling through the variants.
pub fn gradient_check_suite(batches: u64) -> (f64, f64) {
    (0..batches).fold((0.0, 0.0), |(e, q), s| {
        let v = Variant::ALL[s as usize % Variant::ALL.len()];
        let r = gradient_check(1000 + s, v);
        assert!(r.num_quadruplets > 0);
        (f64::max(e, r.max_rel_embedding), f64::max(q, r.max_rel_param))
    })
}
