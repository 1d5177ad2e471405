//! Sequential diffusion language models at desk scale.
//!
//! A small decoder transformer is trained to predict the next *block* of
//! tokens from a noise block `[previous token, mask, ..., mask]`, with many
//! such blocks packed into one interleaved training sequence. At inference
//! the engine proposes `D` tokens per forward pass and keeps the longest
//! prefix it trusts, either by a cumulative confidence threshold or by a
//! batched self-verification pass. Committed tokens live in a KV cache.
//!
//! Module map:
//! - [`corpus`]: vocabularies and deterministic synthetic tasks
//! - [`layout`]: attention masks, position ids and loss targets
//! - [`net`]: the transformer, its gradients, KV cache and checkpoints
//! - [`trainer`]: block-prediction and next-token losses, Adam loop
//! - [`decode`]: confidence scoring, longest-prefix and speculative decoding
//! - [`bench`]: exact-match evaluation, threshold sweeps and ablations

pub mod bench;
pub mod corpus;
pub mod decode;
mod error;
pub mod layout;
pub mod net;
pub mod trainer;

pub use error::{Result, SdlmError};

/// Index into a [`corpus::Vocab`].
pub type TokenId = u32;
