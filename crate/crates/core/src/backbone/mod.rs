//! Decoder-only backbone: TimeMoE main blocks followed by TimeSTP blocks.

pub mod attention;
pub mod block;
mod config;
pub mod model;
pub mod moe;

pub use attention::{attention_forward, AttentionParams, AttentionShape};
pub use block::{timemoe_forward, timestp_forward, BlockParams, BlockShape, StpParams};
pub use config::{default_quantiles, ModelConfig, StpVariant};
pub use model::{backward, forward_cached, model_forward, ForwardOutputs, ForwardTrace, Model, ModelParams, TokenInput};
pub use moe::{aux_loss, gates, moe_forward, top_k_indices, AuxStats, MoeParams};
