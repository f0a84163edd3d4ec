//! The toy vision-language model.
//!
//! An image is cut into `M` patches and embedded by a frozen
//! [`VisionEncoder`]. The trainable [`Projector`] maps each patch feature
//! into the LLM's word-embedding space, producing `H_I`. The decoder reads
//! `H_I ⊕ embed(question) ⊕ embed(answer)` under a causal mask and predicts
//! the next token at every position.

mod config;
mod gradcheck;
pub mod params;
pub mod tokenizer;
mod vlm;

pub use config::ModelConfig;
pub use gradcheck::check_param_grads;
pub use params::{FreezeMask, Param, ParamGroup, ParamId, ParamStore};
pub use tokenizer::Tokenizer;
pub use vlm::{
    answer_targets, Block, DecoderLlm, Generation, GenerationConfig, Linear, Norm, Projector,
    RouteTrace, ToyVlm, VisionEncoder,
};

#[cfg(test)]
pub(crate) mod tests;
