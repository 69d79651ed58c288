//! Windowed-attention (Swin) classifier: configuration, parameters, forward
//! pass and checkpoints.

mod checkpoint;
mod config;
mod model;
mod weights;

pub use checkpoint::{load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader, TensorEntry};
pub use config::{Preset, SwinConfig};
pub use model::{
    attention_mask, cyclic_shift, cyclic_shift_index, layer_norm, linear, merge_index, patch_index,
    patch_merging, relative_position_index, shift_region_ids, swin_block, window_partition,
    window_partition_index, window_reverse, window_reverse_index, windowed_attention, AttentionOutput,
    BlockGeometry, ForwardTrace, SwinModel, MASK_VALUE,
};
pub use weights::{BlockW, LinearW, MergeW, ModelParams, NormW, ParamTree, StageW, SwinWeights};
