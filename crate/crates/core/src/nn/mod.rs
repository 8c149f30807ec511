//! Network architecture: ResNet encoder, scSE attention decoder and
//! segmentation head, built on [`crate::tensor`].

mod blocks;
mod config;
mod network;
mod store;

pub use blocks::{
    bottleneck_block, cse, decoder_block, init_attention, init_bn, init_bottleneck_block, init_conv,
    init_decoder_block, init_residual_block, init_segmentation_head, residual_block, scse, segmentation_head, sse,
};
pub use config::{BlockKind, DecoderWiring, NetworkConfig, INPUT_MULTIPLE};
pub use network::{encoder_forward, init_encoder, network_forward, Network};
pub use store::{Entry, Forward, ForwardOutput, ParamKind, ParameterStore};

/// Batch-norm numerical floor and running-average momentum.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
