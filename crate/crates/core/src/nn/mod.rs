//! Minimal neural-network toolkit on top of candle tensors.

mod blocks;
pub mod conv;
pub mod fused;
mod layers;
mod optim;
mod params;

pub use blocks::{ResBlock, NORM_GROUPS};
pub use fused::{silu, upsample2x};
pub use layers::{stats_dtype, softmax_last_dim, Attention, Conv2d, GroupNorm, LayerNorm, Linear};
pub use optim::{AdamConfig, AdamW, Gradients};
pub use params::{Init, ParamStore};
