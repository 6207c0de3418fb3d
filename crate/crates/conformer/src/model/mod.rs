//! The conformer language model: decoder blocks with causal self-attention
//! and feed-forward sublayers, causal convolution modules sandwiched in the
//! gaps between blocks, learned token + positional embeddings, and a linear
//! vocab head.

mod checkpoint;
mod config;
mod forward;
mod generate;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{ConvBlockSpec, ConvLayerSpec, ConvPlacement, ModelConfig};
pub use forward::{
    bind_params, conformer_forward, conv_module, decoder_block, feed_forward, logits_for,
    multi_head_causal_attention, BoundAttention, BoundBlock, BoundConvLayer, BoundConvModule,
    BoundParams, ForwardCtx, ForwardOutput, LAYER_NORM_EPS,
};
pub use generate::{argmax_lowest_tie, generate};
pub use params::{
    count_parameters, AttentionParams, BlockParams, ConvLayerParams, ConvModuleParams,
    ModelParams, ParamCount,
};
