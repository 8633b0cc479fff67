//! Dual-CLS vision transformer encoder and its ablation variants.

mod config;
mod encoder;
mod params;

pub use config::{EncoderConfig, Variant};
pub use encoder::{images_to_batch, EmbedTrace, Embeddings, Encoder, ForwardCache, Head, LN_EPS, NORM_EPS};
pub use params::{init_params, BlockSlots, InitKind, Layout, NamedSlot, Slot, INIT_STD};

/// Initial parameters for `config`, deterministic in `seed`.
pub fn parameter_init<F: crate::real::Real>(config: &EncoderConfig, seed: u64) -> crate::Result<Vec<F>> {
    config.validate()?;
    Ok(init_params(&Layout::new(config), seed))
}
