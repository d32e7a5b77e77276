//! The local-global attended network: a per-post bidirectional encoder, a
//! causally masked decoder over post embeddings, and classifier and
//! projection heads.

mod config;
mod forward;
mod params;

pub use config::{ModelConfig, Variant};
pub use forward::{bind, predicted_label, BatchOutput, Forward, ForwardOutput, Model};
pub use params::{init_params, param_shapes, Block, ModelParams, Params};
