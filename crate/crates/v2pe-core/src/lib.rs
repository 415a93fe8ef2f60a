//! Variable visual position encoding lab.
//!
//! Interleaved image/text token sequences get their rotary position indices
//! from a modality-aware recursion: textual tokens advance the index by 1,
//! visual tokens by a per-image fractional increment `delta`. Small deltas
//! keep long multimodal sequences inside a model's trained position window;
//! variable deltas during training let a model tolerate arbitrary deltas at
//! inference. This crate implements that index derivation, rotary embeddings
//! at real-valued positions (plus the linear-interpolation and NTK-scaled
//! long-context baselines), a tiny trainable decoder-only transformer with a
//! hand-written backward pass, and a synthetic multimodal needle-retrieval
//! benchmark for exercising the whole stack end to end.

pub mod config;
pub mod longmr;
pub mod posembed;
pub mod posindex;
pub mod rational;
pub mod selftest;
pub mod tinyformer;
pub mod tokenstream;

pub use posembed::{EmbedScheme, RopeConfig};
pub use posindex::{DeltaAssignment, DeltaMode, DeltaPolicy, DeltaTarget, PositionSequence};
pub use rational::Dyadic;
pub use tokenstream::{Modality, Token, TokenStream};
