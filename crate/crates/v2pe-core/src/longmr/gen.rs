//! Seed-deterministic sample and suite generation.
//!
//! The generation path draws integers only, so suites are reproducible
//! across platforms bit for bit.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{GenConfig, Needle, NeedleSample};
use crate::tinyformer::{splitmix64, Span};
use crate::tokenstream::{Modality, StreamBuilder, StreamError};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GenError {
    #[error("length bucket {bucket} cannot host needles and question ({required} tokens needed)")]
    Capacity { bucket: usize, required: usize },
    #[error("vocabulary layout needs {required} symbols but vocab_size is {vocab}")]
    VocabTooSmall { required: u32, vocab: u32 },
    #[error("need {needles} distinct keys/answers but layout provides {keys} keys, {answers} answers")]
    NotEnoughNeedleSymbols {
        needles: usize,
        keys: u32,
        answers: u32,
    },
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("buckets must be strictly increasing")]
    BucketsNotIncreasing,
    #[error(transparent)]
    Stream(#[from] StreamError),
}

fn validate(cfg: &GenConfig) -> Result<(), GenError> {
    if cfg.vocab.required_vocab() > cfg.vocab_size {
        return Err(GenError::VocabTooSmall {
            required: cfg.vocab.required_vocab(),
            vocab: cfg.vocab_size,
        });
    }
    let needles = cfg.n_negatives + 1;
    if needles > cfg.vocab.key_symbols as usize || needles > cfg.vocab.answer_symbols as usize {
        return Err(GenError::NotEnoughNeedleSymbols {
            needles,
            keys: cfg.vocab.key_symbols,
            answers: cfg.vocab.answer_symbols,
        });
    }
    if cfg.vocab.filler_symbols == 0 {
        return Err(GenError::Config("filler range is empty".into()));
    }
    if cfg.needle_modality == Modality::Visual && cfg.needle_image_tokens < 2 {
        return Err(GenError::Config(
            "visual needle needs at least 2 tokens (key, answer)".into(),
        ));
    }
    if cfg.image_tokens.0 == 0 || cfg.image_tokens.0 > cfg.image_tokens.1 {
        return Err(GenError::Config("bad image_tokens range".into()));
    }
    if cfg.text_run.0 == 0 || cfg.text_run.0 > cfg.text_run.1 {
        return Err(GenError::Config("bad text_run range".into()));
    }
    Ok(())
}

fn draw_distinct(rng: &mut ChaCha8Rng, k: u32, n: usize) -> Vec<u32> {
    let mut chosen: Vec<u32> = Vec::with_capacity(n);
    while chosen.len() < n {
        let c = rng.random_range(0..k as u64) as u32;
        if !chosen.contains(&c) {
            chosen.push(c);
        }
    }
    chosen
}

enum Block {
    Text(Vec<u32>),
    Image(Vec<u32>),
}

/// Generate one sample. Deterministic in `(cfg, seed)`.
///
/// Filler alternates seeded-random text runs and image blocks; needles are
/// inserted at block boundaries (never inside an image run); the question
/// (`marker, key`) and the single answer token close the sequence. The
/// emitted length equals the bucket exactly.
pub fn gen_sample(cfg: &GenConfig, seed: u64) -> Result<NeedleSample, GenError> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_needles = cfg.n_negatives + 1;
    let needle_len = match cfg.needle_modality {
        Modality::Visual => cfg.needle_image_tokens,
        Modality::Textual => 2,
    };
    let overhead = n_needles * needle_len + 3; // question marker, key, answer
    if cfg.length_bucket < overhead {
        return Err(GenError::Capacity {
            bucket: cfg.length_bucket,
            required: overhead,
        });
    }
    let filler_budget = cfg.length_bucket - overhead;

    let filler = cfg.vocab.filler_symbols as u64;
    let draw_filler =
        |rng: &mut ChaCha8Rng, n: usize| -> Vec<u32> {
            (0..n).map(|_| rng.random_range(0..filler) as u32).collect()
        };

    // Alternating text/image filler, truncated to the exact budget.
    let mut blocks: Vec<Block> = Vec::new();
    let mut total = 0usize;
    let mut want_text = true;
    while total < filler_budget {
        let len = if want_text {
            rng.random_range(cfg.text_run.0 as u64..=cfg.text_run.1 as u64) as usize
        } else {
            rng.random_range(cfg.image_tokens.0 as u64..=cfg.image_tokens.1 as u64) as usize
        };
        let len = len.min(filler_budget - total);
        if len > 0 {
            let syms = draw_filler(&mut rng, len);
            blocks.push(if want_text {
                Block::Text(syms)
            } else {
                Block::Image(syms)
            });
            total += len;
        }
        want_text = !want_text;
    }
    debug_assert_eq!(total, filler_budget);

    // Needle identities.
    let target_index = rng.random_range(0..n_needles as u64) as usize;
    let keys = draw_distinct(&mut rng, cfg.vocab.key_symbols, n_needles);
    let answers = draw_distinct(&mut rng, cfg.vocab.answer_symbols, n_needles);

    // Insertion boundaries (pre-sorted so spans come out ordered).
    let n_boundaries = blocks.len() + 1;
    let mut slots: Vec<usize> = (0..n_needles)
        .map(|_| rng.random_range(0..n_boundaries as u64) as usize)
        .collect();
    slots.sort_unstable();

    // Assemble: walk blocks, injecting needles at their boundaries.
    let mut b = StreamBuilder::new();
    let mut needles: Vec<Needle> = Vec::new();
    let mut slot_cursor = 0usize;
    let mut emit_needles_at = |boundary: usize, b: &mut StreamBuilder, cursor: &mut usize| {
        while *cursor < slots.len() && slots[*cursor] == boundary {
            let i = *cursor;
            let key = cfg.vocab.key(keys[i]);
            let answer = cfg.vocab.answer(answers[i]);
            let start = b.len();
            match cfg.needle_modality {
                Modality::Visual => {
                    let mut syms = vec![key, answer];
                    // Pad needle images with filler symbols.
                    while syms.len() < cfg.needle_image_tokens {
                        syms.push(0);
                    }
                    b.push_image(&syms);
                }
                Modality::Textual => {
                    b.push_text_run(&[key, answer]);
                }
            }
            needles.push(Needle {
                span_start: start,
                span_len: needle_len,
                is_target: i == target_index,
                key_symbol: key,
                answer_symbol: answer,
            });
            *cursor += 1;
        }
    };
    for (bi, block) in blocks.iter().enumerate() {
        emit_needles_at(bi, &mut b, &mut slot_cursor);
        match block {
            Block::Text(syms) => {
                b.push_text_run(syms);
            }
            Block::Image(syms) => {
                b.push_image(syms);
            }
        }
    }
    emit_needles_at(blocks.len(), &mut b, &mut slot_cursor);

    let target_needle = needles.iter().position(|n| n.is_target).unwrap();
    let question_start = b.len();
    b.push_text_run(&[
        cfg.vocab.query_marker(),
        needles[target_needle].key_symbol,
    ]);
    let answer_start = b.len();
    b.push_text(needles[target_needle].answer_symbol);

    let haystack = b.finish(cfg.vocab_size)?;
    debug_assert_eq!(haystack.len(), cfg.length_bucket);
    Ok(NeedleSample {
        haystack,
        needles,
        question_span: Span::new(question_start, 2),
        answer_span: Span::new(answer_start, 1),
        length_bucket: cfg.length_bucket,
    })
}

/// Per-sample seed for suite generation: mixes the suite seed with the
/// bucket index and the in-bucket sample index.
pub fn suite_seed(seed: u64, bucket_index: usize, sample_index: usize) -> u64 {
    let a = splitmix64(seed ^ (bucket_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    splitmix64(a ^ (sample_index as u64).wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// `per_bucket` samples per bucket, stable order, reproducible.
pub fn make_suite(
    buckets: &[usize],
    per_bucket: usize,
    cfg: &GenConfig,
    seed: u64,
) -> Result<Vec<NeedleSample>, GenError> {
    if buckets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(GenError::BucketsNotIncreasing);
    }
    let mut out = Vec::with_capacity(buckets.len() * per_bucket);
    for (bi, &bucket) in buckets.iter().enumerate() {
        let bucket_cfg = cfg.with_bucket(bucket);
        for j in 0..per_bucket {
            out.push(gen_sample(&bucket_cfg, suite_seed(seed, bi, j))?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    pub(crate) fn test_config() -> GenConfig {
        GenConfig {
            length_bucket: 128,
            n_negatives: 2,
            needle_modality: Modality::Visual,
            image_tokens: (8, 24),
            text_run: (2, 8),
            needle_image_tokens: 4,
            vocab_size: 64,
            vocab: super::super::VocabLayout {
                filler_symbols: 40,
                key_symbols: 10,
                answer_symbols: 10,
            },
        }
    }

    #[test]
    fn single_needle_bucket_bounds() {
        let cfg = GenConfig {
            length_bucket: 64,
            n_negatives: 0,
            ..test_config()
        };
        let sample = gen_sample(&cfg, 7).unwrap();
        assert_eq!(sample.needles.len(), 1);
        assert!(sample.haystack.len() >= 58 && sample.haystack.len() <= 70);
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = test_config();
        assert_eq!(gen_sample(&cfg, 42).unwrap(), gen_sample(&cfg, 42).unwrap());
        assert_ne!(gen_sample(&cfg, 42).unwrap(), gen_sample(&cfg, 43).unwrap());
    }

    #[test]
    fn negatives_have_distinct_keys_and_answers() {
        let cfg = GenConfig {
            n_negatives: 3,
            length_bucket: 256,
            ..test_config()
        };
        let sample = gen_sample(&cfg, 5).unwrap();
        assert_eq!(sample.needles.len(), 4);
        assert_eq!(sample.needles.iter().filter(|n| n.is_target).count(), 1);
        let keys: HashSet<u32> = sample.needles.iter().map(|n| n.key_symbol).collect();
        let answers: HashSet<u32> = sample.needles.iter().map(|n| n.answer_symbol).collect();
        assert_eq!(keys.len(), 4);
        assert_eq!(answers.len(), 4);
    }

    #[test]
    fn needle_spans_audit_by_reparse() {
        let cfg = GenConfig {
            n_negatives: 3,
            length_bucket: 320,
            ..test_config()
        };
        for seed in 0..20 {
            let sample = gen_sample(&cfg, seed).unwrap();
            let toks = sample.haystack.tokens();
            for n in &sample.needles {
                // Span content starts with (key, answer).
                assert_eq!(toks[n.span_start].symbol_id, n.key_symbol);
                assert_eq!(toks[n.span_start + 1].symbol_id, n.answer_symbol);
            }
            // Spans are disjoint and precede the question.
            let mut spans: Vec<_> = sample
                .needles
                .iter()
                .map(|n| (n.span_start, n.span_start + n.span_len))
                .collect();
            spans.sort_unstable();
            for w in spans.windows(2) {
                assert!(w[0].1 <= w[1].0);
            }
            assert!(spans.last().unwrap().1 <= sample.question_span.start);
            // Question names the target key; answer span holds its answer.
            let target = sample.target();
            assert_eq!(
                toks[sample.question_span.start].symbol_id,
                cfg.vocab.query_marker()
            );
            assert_eq!(
                toks[sample.question_span.start + 1].symbol_id,
                target.key_symbol
            );
            assert_eq!(
                toks[sample.answer_span.start].symbol_id,
                target.answer_symbol
            );
        }
    }

    #[test]
    fn textual_needles() {
        let cfg = GenConfig {
            needle_modality: Modality::Textual,
            ..test_config()
        };
        let sample = gen_sample(&cfg, 3).unwrap();
        for n in &sample.needles {
            assert_eq!(n.span_len, 2);
            assert!(!sample.haystack.tokens()[n.span_start].is_visual());
        }
    }

    #[test]
    fn capacity_error_when_bucket_too_small() {
        let cfg = GenConfig {
            length_bucket: 8,
            n_negatives: 3,
            ..test_config()
        };
        assert!(matches!(
            gen_sample(&cfg, 1),
            Err(GenError::Capacity { .. })
        ));
    }

    #[test]
    fn suite_counts_and_bucket_fidelity() {
        let cfg = test_config();
        let suite = make_suite(&[128, 256, 512], 20, &cfg, 99).unwrap();
        assert_eq!(suite.len(), 60);
        for s in &suite {
            let lo = s.length_bucket as f64 * 0.9;
            let hi = s.length_bucket as f64 * 1.1;
            let n = s.haystack.len() as f64;
            assert!(n >= lo && n <= hi, "len {n} outside bucket {}", s.length_bucket);
        }
        // Stable ordering & reproducibility.
        let again = make_suite(&[128, 256, 512], 20, &cfg, 99).unwrap();
        assert_eq!(suite, again);
    }

    #[test]
    fn disjoint_seeds_disjoint_samples() {
        let cfg = test_config();
        let a = make_suite(&[128], 25, &cfg, 1).unwrap();
        let b = make_suite(&[128], 25, &cfg, 2).unwrap();
        let set: HashSet<String> = a
            .iter()
            .map(|s| serde_json::to_string(&s.haystack).unwrap())
            .collect();
        assert!(b
            .iter()
            .all(|s| !set.contains(&serde_json::to_string(&s.haystack).unwrap())));
    }

    #[test]
    fn non_increasing_buckets_rejected() {
        let cfg = test_config();
        assert_eq!(
            make_suite(&[128, 128], 1, &cfg, 0),
            Err(GenError::BucketsNotIncreasing)
        );
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = test_config();
        let suite = make_suite(&[96], 3, &cfg, 17).unwrap();
        let mut buf = Vec::new();
        super::super::write_samples_jsonl(&suite, &mut buf).unwrap();
        let back = super::super::read_samples_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, suite);
        let mut buf2 = Vec::new();
        super::super::write_samples_jsonl(&back, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }
}
