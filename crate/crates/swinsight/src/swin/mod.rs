//! The hierarchical windowed-attention classifier: patch embedding,
//! alternating regular/shifted window-attention blocks, patch merging
//! between stages, global pooling, and the 2-class head.

mod attention;
mod blocks;
mod config;
mod model;
mod window;

pub use blocks::{patch_embed, patch_merging, swin_block, BlockParams};
pub use attention::{
    relative_position_index, window_attention, window_attention_with_weights, AttentionParams,
};
pub use config::{ModelConfig, StageGeometry};
pub use model::{ForwardPass, Mode, SwinModel};
pub use window::{
    attention_mask, cyclic_shift, cyclic_unshift, window_partition, window_reverse, MASK_VALUE,
};
