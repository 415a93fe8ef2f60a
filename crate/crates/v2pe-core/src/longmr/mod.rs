//! Synthetic long-context multimodal retrieval.
//!
//! A sample is a long interleaved haystack of filler text runs and image
//! blocks, with several key→answer needles inserted at block boundaries.
//! Exactly one needle is the target; the rest are negatives with distinct
//! keys and distinct answers. The trailing question names the target key,
//! and the final token is the answer symbol. Scoring is a single forward
//! pass: a sample is correct iff, at every answer-span position, the argmax
//! logit of the predicting row equals the ground-truth symbol.

mod eval;
mod gen;

pub use eval::{
    score_sample, score_sample_compressed, score_sample_with_rope, sweep, write_records_csv,
    EmbedSpec, EvalDelta, EvalRecord, ScoreError, ScoringModel,
};
pub use gen::{gen_sample, make_suite, suite_seed, GenError};

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::tinyformer::{Span, TrainExample};
use crate::tokenstream::{Modality, TokenStream};

/// Reserved symbol ranges: filler, then keys, then answers, then the query
/// marker. Keys and answers never occur as filler, which keeps the
/// retrieval task learnable by a tiny model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub filler_symbols: u32,
    pub key_symbols: u32,
    pub answer_symbols: u32,
}

impl VocabLayout {
    pub fn key(&self, i: u32) -> u32 {
        self.filler_symbols + i
    }

    pub fn answer(&self, i: u32) -> u32 {
        self.filler_symbols + self.key_symbols + i
    }

    pub fn query_marker(&self) -> u32 {
        self.filler_symbols + self.key_symbols + self.answer_symbols
    }

    pub fn required_vocab(&self) -> u32 {
        self.query_marker() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Intended token count; emitted samples land within ±10% (exactly on
    /// it, in this generator).
    pub length_bucket: usize,
    pub n_negatives: usize,
    /// Needles are either small image blocks or two-token text spans.
    pub needle_modality: Modality,
    /// Inclusive size range of filler image runs.
    pub image_tokens: (usize, usize),
    /// Inclusive size range of filler text runs.
    pub text_run: (usize, usize),
    /// Visual-needle block size (key, answer, then filler), >= 2.
    pub needle_image_tokens: usize,
    pub vocab_size: u32,
    pub vocab: VocabLayout,
}

impl GenConfig {
    pub fn with_bucket(&self, length_bucket: usize) -> Self {
        GenConfig {
            length_bucket,
            ..*self
        }
    }
}

/// One inserted needle, by token span within the haystack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Needle {
    pub span_start: usize,
    pub span_len: usize,
    pub is_target: bool,
    pub key_symbol: u32,
    pub answer_symbol: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleSample {
    pub haystack: TokenStream,
    pub needles: Vec<Needle>,
    pub question_span: Span,
    pub answer_span: Span,
    pub length_bucket: usize,
}

impl NeedleSample {
    pub fn target(&self) -> &Needle {
        self.needles
            .iter()
            .find(|n| n.is_target)
            .expect("sample invariant: exactly one target")
    }

    /// View as a training example (loss over the answer span).
    pub fn to_train_example(&self) -> TrainExample {
        TrainExample {
            stream: self.haystack.clone(),
            answer_span: self.answer_span,
        }
    }
}

pub fn write_samples_jsonl<W: Write>(samples: &[NeedleSample], mut out: W) -> std::io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_samples_jsonl<R: BufRead>(input: R) -> std::io::Result<Vec<NeedleSample>> {
    let mut samples = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(serde_json::from_str(&line)?);
    }
    Ok(samples)
}
