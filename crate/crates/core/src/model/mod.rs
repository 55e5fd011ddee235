//! Tiny decoder-only multimodal transformer.

mod config;
mod forward;
mod params;

pub use config::ModelConfig;
pub use forward::{
    argmax, embed_inputs, embed_patches, embed_tokens, forward, forward_pass_count, greedy_decode,
    next_token_distribution, Decoded, EmbeddedSeq, ForwardTrace, ForwardVars, Tag,
};
pub use params::{param_specs, LayerParam, ParamVars, Params};

#[cfg(test)]
mod tests;
