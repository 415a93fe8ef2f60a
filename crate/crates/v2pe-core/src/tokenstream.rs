//! Interleaved multimodal token sequences.
//!
//! A [`TokenStream`] is an ordered list of textual and visual tokens. Visual
//! tokens carry the id of the image they belong to; all tokens of one image
//! form a single contiguous run, and image ids appear in order 0,1,2,…
//! Those invariants are enforced at construction, so downstream code (the
//! position recursion in particular, which assigns one delta per image) can
//! rely on them without re-checking.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StreamError {
    #[error("token {index}: visual token is missing an image id")]
    MissingImageId { index: usize },
    #[error("token {index}: textual token carries image id {image_id}")]
    ImageIdOnTextual { index: usize, image_id: u32 },
    #[error("token {index}: symbol {symbol_id} is outside vocabulary of size {vocab_size}")]
    SymbolOutOfRange {
        index: usize,
        symbol_id: u32,
        vocab_size: u32,
    },
    #[error("image {image_id} is split into non-contiguous runs (second run starts at token {index})")]
    NonContiguousImage { index: usize, image_id: u32 },
    #[error("token {index}: image id {image_id} appears out of order (expected {expected})")]
    NonDenseImageIds {
        index: usize,
        image_id: u32,
        expected: u32,
    },
    #[error("vocabulary size must be positive")]
    EmptyVocabulary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "T")]
    Textual,
    #[serde(rename = "V")]
    Visual,
}

/// One token of an interleaved sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    #[serde(rename = "m")]
    pub modality: Modality,
    #[serde(rename = "img", skip_serializing_if = "Option::is_none", default)]
    pub image_id: Option<u32>,
    #[serde(rename = "id")]
    pub symbol_id: u32,
}

impl Token {
    pub fn textual(symbol_id: u32) -> Self {
        Token {
            modality: Modality::Textual,
            image_id: None,
            symbol_id,
        }
    }

    pub fn visual(image_id: u32, symbol_id: u32) -> Self {
        Token {
            modality: Modality::Visual,
            image_id: Some(image_id),
            symbol_id,
        }
    }

    pub fn is_visual(&self) -> bool {
        self.modality == Modality::Visual
    }
}

/// A contiguous run of visual tokens belonging to one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageRun {
    pub image_id: u32,
    pub start: usize,
    pub len: usize,
}

/// An immutable, validated interleaved token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    tokens: Vec<Token>,
    vocab_size: u32,
}

impl TokenStream {
    /// Validate and wrap a token list. Rejects streams that violate any of
    /// the structural invariants (image-id presence, vocabulary range,
    /// contiguous image runs, dense in-order image ids).
    pub fn new(tokens: Vec<Token>, vocab_size: u32) -> Result<Self, StreamError> {
        if vocab_size == 0 {
            return Err(StreamError::EmptyVocabulary);
        }
        let mut next_image: u32 = 0;
        let mut current_image: Option<u32> = None;
        for (index, tok) in tokens.iter().enumerate() {
            if tok.symbol_id >= vocab_size {
                return Err(StreamError::SymbolOutOfRange {
                    index,
                    symbol_id: tok.symbol_id,
                    vocab_size,
                });
            }
            match (tok.modality, tok.image_id) {
                (Modality::Textual, Some(image_id)) => {
                    return Err(StreamError::ImageIdOnTextual { index, image_id });
                }
                (Modality::Textual, None) => {
                    current_image = None;
                }
                (Modality::Visual, None) => {
                    return Err(StreamError::MissingImageId { index });
                }
                (Modality::Visual, Some(id)) => {
                    if current_image == Some(id) {
                        continue; // same run
                    }
                    if id < next_image {
                        // Re-opening an image that already closed.
                        return Err(StreamError::NonContiguousImage {
                            index,
                            image_id: id,
                        });
                    }
                    if id > next_image {
                        return Err(StreamError::NonDenseImageIds {
                            index,
                            image_id: id,
                            expected: next_image,
                        });
                    }
                    current_image = Some(id);
                    next_image += 1;
                }
            }
        }
        Ok(TokenStream { tokens, vocab_size })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of distinct images.
    pub fn n_images(&self) -> u32 {
        self.tokens
            .iter()
            .filter_map(|t| t.image_id)
            .max()
            .map_or(0, |m| m + 1)
    }

    /// One `(image_id, start, len)` entry per image, in order. The runs
    /// partition exactly the visual positions of the stream.
    pub fn image_runs(&self) -> Vec<ImageRun> {
        let mut runs: Vec<ImageRun> = Vec::new();
        for (i, tok) in self.tokens.iter().enumerate() {
            if let Some(id) = tok.image_id {
                match runs.last_mut() {
                    Some(run) if run.image_id == id && run.start + run.len == i => {
                        run.len += 1;
                    }
                    _ => runs.push(ImageRun {
                        image_id: id,
                        start: i,
                        len: 1,
                    }),
                }
            }
        }
        runs
    }

    /// Token counts as `(n_textual, n_visual)`.
    pub fn count_by_modality(&self) -> (usize, usize) {
        let n_visual = self.tokens.iter().filter(|t| t.is_visual()).count();
        (self.tokens.len() - n_visual, n_visual)
    }
}

/// Wire form mirroring the JSONL schema; parsing re-validates invariants.
#[derive(Serialize, Deserialize)]
struct StreamWire {
    tokens: Vec<Token>,
    vocab_size: u32,
}

impl Serialize for TokenStream {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        StreamWire {
            tokens: self.tokens.clone(),
            vocab_size: self.vocab_size,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TokenStream {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = StreamWire::deserialize(deserializer)?;
        TokenStream::new(wire.tokens, wire.vocab_size).map_err(serde::de::Error::custom)
    }
}

/// Write one stream per line.
pub fn write_jsonl<W: Write>(streams: &[TokenStream], mut out: W) -> std::io::Result<()> {
    for s in streams {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a JSONL stream file; blank lines are skipped.
pub fn read_jsonl<R: BufRead>(input: R) -> std::io::Result<Vec<TokenStream>> {
    let mut streams = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let stream: TokenStream = serde_json::from_str(&line)?;
        streams.push(stream);
    }
    Ok(streams)
}

/// Incremental constructor that assigns image ids in order of appearance.
#[derive(Debug, Default)]
pub struct StreamBuilder {
    tokens: Vec<Token>,
    next_image: u32,
}

impl StreamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_text(&mut self, symbol_id: u32) -> &mut Self {
        self.tokens.push(Token::textual(symbol_id));
        self
    }

    pub fn push_text_run(&mut self, symbols: &[u32]) -> &mut Self {
        for &s in symbols {
            self.push_text(s);
        }
        self
    }

    /// Append one image as a contiguous run; returns its image id.
    pub fn push_image(&mut self, symbols: &[u32]) -> u32 {
        let id = self.next_image;
        self.next_image += 1;
        for &s in symbols {
            self.tokens.push(Token::visual(id, s));
        }
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn finish(self, vocab_size: u32) -> Result<TokenStream, StreamError> {
        TokenStream::new(self.tokens, vocab_size)
    }
}
