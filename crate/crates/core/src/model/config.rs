use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token/projection arrangement. The three single-token variants share an
/// architecture and differ only in how the objectives are routed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Two CLS tokens: token 0 feeds `g_id`, token 1 feeds `g_head`.
    DualCls,
    /// One token, one projection; `z_head` is the same vector as `z_id`.
    Shared,
    /// One token, two projections; identity branch gets only the alignment loss.
    DualHeadSplit,
    /// One token, two projections; identity branch gets alignment and similarity.
    DualHeadBoth,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Shared,
        Variant::DualHeadSplit,
        Variant::DualHeadBoth,
        Variant::DualCls,
    ];

    pub fn num_cls(self) -> usize {
        match self {
            Variant::DualCls => 2,
            _ => 1,
        }
    }

    pub fn has_head_projection(self) -> bool {
        self != Variant::Shared
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Shared => "Shared Embedding",
            Variant::DualHeadSplit => "Dual-Head (Split)",
            Variant::DualHeadBoth => "Dual-Head (Both)",
            Variant::DualCls => "Dual-CLS",
        }
    }

    /// Losses applied to the identity embedding.
    pub fn loss_on_id(self) -> &'static str {
        match self {
            Variant::DualHeadSplit => "L_align",
            _ => "L_align+L_sim",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::DualCls => "dual_cls",
            Variant::Shared => "shared",
            Variant::DualHeadSplit => "dual_head_split",
            Variant::DualHeadBoth => "dual_head_both",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual_cls" => Ok(Variant::DualCls),
            "shared" => Ok(Variant::Shared),
            "dual_head_split" => Ok(Variant::DualHeadSplit),
            "dual_head_both" => Ok(Variant::DualHeadBoth),
            other => Err(Error::InvalidConfig(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub variant: Variant,
    pub mlp_ratio: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 128,
            depth: 4,
            num_heads: 4,
            variant: Variant::DualCls,
            mlp_ratio: 4.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::InvalidConfig(format!(
                "patch_size {} must divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.mlp_hidden() == 0 {
            return Err(Error::InvalidConfig("mlp_ratio yields an empty hidden layer".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_tokens(&self) -> usize {
        self.variant.num_cls() + self.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}
