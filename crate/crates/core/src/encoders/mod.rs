//! Transformer encoders for images and captions.

mod config;
mod forward;
mod params;

pub use config::{EncoderConfig, PosEncoding, Readout};
pub use forward::{
    encode, encode_batch, forward, vision_tokens, AttentionTrace, BlockTrace, ForwardOptions, ForwardOutput,
    Intervention,
};
pub use params::{init_weights, AttnParams, BlockParams, EncoderParams, EncoderWeights, LnParams, MlpParams};
