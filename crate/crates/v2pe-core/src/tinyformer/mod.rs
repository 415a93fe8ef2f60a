//! A minimal trainable decoder-only transformer.
//!
//! Small enough to gradient-check against finite differences, complete
//! enough to exercise every position scheme end to end: causal attention
//! with rotary embeddings applied at arbitrary real-valued positions, a
//! hand-written backward pass, an AdamW training loop, mean-pool token
//! compression, and attention-map extraction. The backward pass is written
//! directly (no autodiff) so the derivative path through fractional-position
//! rotations stays fully under test.

mod checkpoint;
mod compress;
mod model;
mod train;

pub use compress::compress_visual_tokens;
pub use model::{BatchItem, Gradients, TinyModel};
pub use train::{train, splitmix64, StepRecord, TrainExample, TrainLog, TrainSettings};

use ndarray::{LinalgScalar, ScalarOperand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::posembed::{EmbedError, RopeConfig};

/// MLP hidden width as a multiple of the model width.
pub const MLP_MULT: usize = 4;

/// Scalar type the model is generic over: `f32` for training, `f64` for
/// gradient checking.
pub trait Real:
    num_traits::Float
    + LinalgScalar
    + ScalarOperand
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> f32 {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> f64 {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("positions length {positions} does not match stream length {tokens}")]
    LengthMismatch { positions: usize, tokens: usize },
    #[error("embedding matrix is {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    EmbedShape {
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("answer span must be non-empty and start after token 0")]
    EmptyTargetSpan,
    #[error("answer span {start}..{end} exceeds sequence length {len}")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error("layer {layer} out of range for a {layers}-layer model")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("tail_rows {tail_rows} exceeds sequence length {len}")]
    TailRowsOutOfRange { tail_rows: usize, len: usize },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("training diverged at step {step}: loss is not finite")]
    TrainingDiverged { step: usize },
    #[error("compression ratio {0} must be a unit fraction 1/2^k in (0, 1]")]
    InvalidRatio(crate::rational::Dyadic),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
}

/// A contiguous token range `[start, start+len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn new(start: usize, len: usize) -> Self {
        Span { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TinyModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab_size: u32,
    /// Largest position index the model is trained to cover; adaptive delta
    /// selection and interpolation factors are computed against this.
    pub max_trained_window: usize,
    pub rope: RopeConfig,
    pub seed: u64,
}

impl TinyModelConfig {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn hidden(&self) -> usize {
        MLP_MULT * self.width()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 || self.heads == 0 {
            return Err(ModelError::Config(
                "layers and heads must be positive".into(),
            ));
        }
        if self.vocab_size == 0 {
            return Err(ModelError::Config("vocab_size must be positive".into()));
        }
        if self.max_trained_window == 0 {
            return Err(ModelError::Config(
                "max_trained_window must be positive".into(),
            ));
        }
        self.rope.validate()?;
        if self.rope.head_dim != self.head_dim {
            return Err(ModelError::Config(format!(
                "rope head_dim {} does not match model head_dim {}",
                self.rope.head_dim, self.head_dim
            )));
        }
        Ok(())
    }
}
