//! Vision transformer encoder: configuration, parameters, forward and
//! backward passes, and the checkpoint format.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod model;
pub mod params;

pub use config::ViTConfig;
pub use model::{
    accumulate_grad, backward, classify, embed, forward, forward_with_cache, grad, AttentionMaps,
    EncoderOutput, ForwardCache, OutputGrad, TokenSequence,
};
pub use params::{attach_head, init_params, ParamSet, Tensor};
