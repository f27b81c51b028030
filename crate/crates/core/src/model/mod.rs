//! GPT-style autoregressive decoder over shifted code grids: summed
//! codebook embeddings, text/speaker conditioning, parallel codebook group
//! heads, and KV-cached incremental decoding.

mod config;
mod forward;
mod infer;
mod params;

pub use config::ModelConfig;
pub use forward::{condition_prefix, forward_full, lm_loss, ParamVars};
pub use infer::{
    embed_codes, encode_condition, forward_full_ungrouped, ConditionPrefix, Decoder, DecoderState,
};
pub use params::{init_params, param_count, parameter_shapes, validate_params, Parameters};
