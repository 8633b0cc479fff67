//! Flat parameter storage with a named layout.
//!
//! All trainable tensors live in one contiguous vector so the optimizer,
//! checkpoints and finite-difference checks can treat them uniformly.

use ndarray::{ArrayView1, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::EncoderConfig;
use crate::real::Real;
use crate::seeding::{keyed_rng, stream};

pub const INIT_STD: f64 = 0.02;

/// A tensor of shape `rows x cols` at `offset` in the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn mat<'a, F>(&self, data: &'a [F]) -> ArrayView2<'a, F> {
        ArrayView2::from_shape((self.rows, self.cols), &data[self.range()]).expect("slot shape")
    }

    pub fn vec<'a, F>(&self, data: &'a [F]) -> ArrayView1<'a, F> {
        ArrayView1::from(&data[self.range()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamedSlot {
    pub name: String,
    pub slot: Slot,
    pub init: InitKind,
    /// Receives decoupled weight decay.
    pub decay: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockSlots {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub qkv_w: Slot,
    pub qkv_b: Slot,
    pub out_w: Slot,
    pub out_b: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub fc1_w: Slot,
    pub fc1_b: Slot,
    pub fc2_w: Slot,
    pub fc2_b: Slot,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub patch_w: Slot,
    pub patch_b: Slot,
    pub pos: Slot,
    pub cls: Slot,
    pub blocks: Vec<BlockSlots>,
    pub lnf_g: Slot,
    pub lnf_b: Slot,
    pub id_w: Slot,
    pub id_b: Slot,
    pub head_w: Option<Slot>,
    pub head_b: Option<Slot>,
    pub entries: Vec<NamedSlot>,
    pub total: usize,
}

struct Builder {
    entries: Vec<NamedSlot>,
    offset: usize,
}

impl Builder {
    fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: InitKind, decay: bool) -> Slot {
        let slot = Slot {
            offset: self.offset,
            rows,
            cols,
        };
        self.offset += slot.len();
        self.entries.push(NamedSlot {
            name: name.into(),
            slot,
            init,
            decay,
        });
        slot
    }
}

impl Layout {
    pub fn new(cfg: &EncoderConfig) -> Self {
        use InitKind::*;
        let d = cfg.embed_dim;
        let h = cfg.mlp_hidden();
        let mut b = Builder {
            entries: Vec::new(),
            offset: 0,
        };
        let patch_w = b.add("patch_embed.weight", cfg.patch_dim(), d, TruncNormal, true);
        let patch_b = b.add("patch_embed.bias", 1, d, Zeros, false);
        let pos = b.add("pos_embed", cfg.num_tokens(), d, TruncNormal, false);
        let cls = b.add("cls_tokens", cfg.variant.num_cls(), d, TruncNormal, false);
        let blocks = (0..cfg.depth)
            .map(|i| BlockSlots {
                ln1_g: b.add(format!("blocks.{i}.norm1.weight"), 1, d, Ones, false),
                ln1_b: b.add(format!("blocks.{i}.norm1.bias"), 1, d, Zeros, false),
                qkv_w: b.add(format!("blocks.{i}.attn.qkv.weight"), d, 3 * d, TruncNormal, true),
                qkv_b: b.add(format!("blocks.{i}.attn.qkv.bias"), 1, 3 * d, Zeros, false),
                out_w: b.add(format!("blocks.{i}.attn.proj.weight"), d, d, TruncNormal, true),
                out_b: b.add(format!("blocks.{i}.attn.proj.bias"), 1, d, Zeros, false),
                ln2_g: b.add(format!("blocks.{i}.norm2.weight"), 1, d, Ones, false),
                ln2_b: b.add(format!("blocks.{i}.norm2.bias"), 1, d, Zeros, false),
                fc1_w: b.add(format!("blocks.{i}.mlp.fc1.weight"), d, h, TruncNormal, true),
                fc1_b: b.add(format!("blocks.{i}.mlp.fc1.bias"), 1, h, Zeros, false),
                fc2_w: b.add(format!("blocks.{i}.mlp.fc2.weight"), h, d, TruncNormal, true),
                fc2_b: b.add(format!("blocks.{i}.mlp.fc2.bias"), 1, d, Zeros, false),
            })
            .collect();
        let lnf_g = b.add("norm.weight", 1, d, Ones, false);
        let lnf_b = b.add("norm.bias", 1, d, Zeros, false);
        let id_w = b.add("g_id.weight", d, d, TruncNormal, true);
        let id_b = b.add("g_id.bias", 1, d, Zeros, false);
        let (head_w, head_b) = if cfg.variant.has_head_projection() {
            (
                Some(b.add("g_head.weight", d, d, TruncNormal, true)),
                Some(b.add("g_head.bias", 1, d, Zeros, false)),
            )
        } else {
            (None, None)
        };
        Layout {
            patch_w,
            patch_b,
            pos,
            cls,
            blocks,
            lnf_g,
            lnf_b,
            id_w,
            id_b,
            head_w,
            head_b,
            total: b.offset,
            entries: b.entries,
        }
    }

    pub fn find(&self, name: &str) -> Option<&NamedSlot> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Per-element weight-decay mask.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for e in &self.entries {
            if e.decay {
                mask[e.slot.range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }
}

fn trunc_normal(rng: &mut impl rand::Rng, std: f64) -> f64 {
    loop {
        let x: f64 = StandardNormal.sample(rng);
        if x.abs() <= 2.0 {
            return x * std;
        }
    }
}

/// Deterministic initialisation. Each row of each tensor draws from its own
/// keyed stream, so the two CLS tokens come from different sub-seeds.
pub fn init_params<F: Real>(layout: &Layout, seed: u64) -> Vec<F> {
    let mut data = vec![F::zero(); layout.total];
    for (k, e) in layout.entries.iter().enumerate() {
        let s = e.slot;
        match e.init {
            InitKind::Zeros => {}
            InitKind::Ones => data[s.range()].iter_mut().for_each(|v| *v = F::one()),
            InitKind::TruncNormal => {
                for r in 0..s.rows {
                    let mut rng = keyed_rng(&[seed, stream::INIT, k as u64, r as u64]);
                    for c in 0..s.cols {
                        data[s.offset + r * s.cols + c] = F::of(trunc_normal(&mut rng, INIT_STD));
                    }
                }
            }
        }
    }
    data
}
