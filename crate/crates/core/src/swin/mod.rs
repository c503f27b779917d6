//! Hierarchical windowed-attention backbone with adapters on the query and
//! value projections.

mod attention;
mod backbone;
mod window;

pub use attention::{
    relative_position_index, shifted_window_masks, window_attention, AttentionWeights,
    WindowAttention, MASK_PENALTY,
};
pub use backbone::{
    backbone_forward, patch_merge_gather, patch_merging, swin_block_pair_forward, Backbone,
    BackboneConfig, StageConfig, StageGeometry, StageOutput, SwinBlock, SwinStage,
};
pub use window::{
    cyclic_shift, invert_permutation, partition_order, shift_order, window_partition,
    window_unpartition, FeatureMap,
};
