//! The adaptive graph convolutional model: layers, blocks, the 9-block
//! network, parameters, and checkpoints.

pub mod block;
pub mod config;
pub mod layers;
pub mod network;
pub mod params;

pub use block::block_forward;
pub use config::{
    embed_width, BlockConfig, GraphToggles, LayerKind, NetworkConfig, COMPACT_CHANNELS,
    DEFAULT_CHANNELS, DEFAULT_DROPOUT, DEFAULT_KERNEL_T, DEFAULT_STRIDES, NUM_BLOCKS,
};
pub use layers::{
    adaptive_spatial_forward, baseline_spatial_forward, channel_mix, embedded_gaussian,
    register_adjacency, AdaptiveLayerVars, BaselineLayerVars, LayerResidual,
};
pub use network::{network_forward, network_trunk, softmax_scores};
pub use params::{
    build_block, build_bn, count_params, load_checkpoint, perturb_uniform, read_checkpoint_meta,
    save_checkpoint, BlockParams, BnParams, BufStore, CheckpointMeta, Gradmap, NetLayout,
    NetParams, Param, ParamStore, ParamVars, SpatialParams, StatsId,
};

/// Batch-norm epsilon guarding zero-variance channels.
pub const BN_EPS: f64 = 1e-5;
/// Momentum folding batch statistics into the running estimates.
pub const BN_MOMENTUM: f64 = 0.1;
