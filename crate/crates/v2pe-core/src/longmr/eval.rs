//! Argmax-over-answer-span scoring and evaluation sweeps.
//!
//! A sample is scored with one forward pass over the full sequence
//! (question and answer tokens included): it is correct iff at every answer
//! position the argmax logit of the row predicting it equals the ground
//! truth. For the extension baselines, the linear interpolation factor is
//! chosen per bucket as `ceil(bucket / trained_window)`; the NTK scaling
//! factor defaults to 5.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

use super::NeedleSample;
use crate::posembed::{EmbedScheme, RopeConfig, DEFAULT_NTK_ALPHA};
use crate::posindex::{
    assign_deltas, derive_positions, DeltaPolicy, DeltaTarget, PolicyError, PositionSequence,
};
use crate::rational::Dyadic;
use crate::tinyformer::{compress_visual_tokens, ModelError, TinyModel};
use crate::tokenstream::TokenStream;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("answer span is empty")]
    EmptyAnswerSpan,
    #[error("answer span starts at token 0, so no row predicts it")]
    SpanAtOrigin,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("sample {index} in bucket {bucket}: {source}")]
    Sample {
        bucket: usize,
        index: usize,
        #[source]
        source: Box<ScoreError>,
    },
}

/// Anything that can emit per-token logits; lets tests swap in oracle or
/// random models behind the same scoring protocol.
pub trait ScoringModel: Sync {
    fn sequence_logits(
        &self,
        stream: &TokenStream,
        positions: &PositionSequence,
        rope: Option<&RopeConfig>,
    ) -> Result<Array2<f32>, ModelError>;

    fn trained_window(&self) -> usize;
}

impl ScoringModel for TinyModel<f32> {
    fn sequence_logits(
        &self,
        stream: &TokenStream,
        positions: &PositionSequence,
        rope: Option<&RopeConfig>,
    ) -> Result<Array2<f32>, ModelError> {
        match rope {
            Some(r) => self.forward_with_rope(stream, positions, r),
            None => self.forward(stream, positions),
        }
    }

    fn trained_window(&self) -> usize {
        self.config().max_trained_window
    }
}

fn argmax_row(logits: &Array2<f32>, row: usize) -> usize {
    let mut best = 0;
    let mut best_val = f32::NEG_INFINITY;
    for (i, &v) in logits.row(row).iter().enumerate() {
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    best
}

fn check_answer_rows(logits: &Array2<f32>, sample: &NeedleSample) -> Result<bool, ScoreError> {
    let span = sample.answer_span;
    if span.len == 0 {
        return Err(ScoreError::EmptyAnswerSpan);
    }
    if span.start == 0 {
        return Err(ScoreError::SpanAtOrigin);
    }
    let toks = sample.haystack.tokens();
    for k in 0..span.len {
        let predicted = argmax_row(logits, span.start + k - 1);
        if predicted != toks[span.start + k].symbol_id as usize {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Score one sample under the model's own rotary config.
pub fn score_sample(
    model: &impl ScoringModel,
    sample: &NeedleSample,
    positions: &PositionSequence,
) -> Result<bool, ScoreError> {
    score_sample_with_rope(model, sample, positions, None)
}

/// Score with an overriding rotary config (extension baselines).
pub fn score_sample_with_rope(
    model: &impl ScoringModel,
    sample: &NeedleSample,
    positions: &PositionSequence,
    rope: Option<&RopeConfig>,
) -> Result<bool, ScoreError> {
    let logits = model.sequence_logits(&sample.haystack, positions, rope)?;
    check_answer_rows(&logits, sample)
}

/// Token-compression baseline: pool visual embeddings at `ratio`, derive
/// uniform positions on the reduced stream, and score the remapped answer
/// span. The trailing question/answer region survives pooling verbatim, so
/// its new index is `new_len - (old_len - old_index)`.
pub fn score_sample_compressed(
    model: &TinyModel<f32>,
    sample: &NeedleSample,
    ratio: Dyadic,
) -> Result<bool, ScoreError> {
    let embeds = model.embed_tokens(&sample.haystack)?;
    let (reduced, reduced_embeds) = compress_visual_tokens(&sample.haystack, &embeds, ratio)?;
    let assignment = assign_deltas(&reduced, &DeltaPolicy::uniform())?;
    let positions = derive_positions(&reduced, &assignment, DeltaTarget::Neither)?;
    let logits = model.forward_embedded(reduced_embeds, &positions)?;

    let span = sample.answer_span;
    if span.len == 0 {
        return Err(ScoreError::EmptyAnswerSpan);
    }
    let shift = sample.haystack.len() - reduced.len();
    if span.start <= shift {
        return Err(ScoreError::SpanAtOrigin);
    }
    let toks = sample.haystack.tokens();
    for k in 0..span.len {
        let predicted = argmax_row(&logits, span.start + k - 1 - shift);
        if predicted != toks[span.start + k].symbol_id as usize {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Index-derivation axis of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalDelta {
    Uniform,
    Fixed(Dyadic),
    Adaptive,
}

impl EvalDelta {
    pub fn policy(&self, trained_window: usize) -> DeltaPolicy {
        match self {
            EvalDelta::Uniform => DeltaPolicy::uniform(),
            EvalDelta::Fixed(d) => DeltaPolicy::fixed(*d, DeltaTarget::VisualOnly),
            EvalDelta::Adaptive => {
                DeltaPolicy::adaptive(trained_window as u64, DeltaTarget::VisualOnly)
            }
        }
    }
}

impl fmt::Display for EvalDelta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalDelta::Uniform => write!(f, "uniform"),
            EvalDelta::Fixed(d) => write!(f, "{d}"),
            EvalDelta::Adaptive => write!(f, "adaptive"),
        }
    }
}

impl FromStr for EvalDelta {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "uniform" => Ok(EvalDelta::Uniform),
            "adaptive" => Ok(EvalDelta::Adaptive),
            other => other
                .parse::<Dyadic>()
                .map(EvalDelta::Fixed)
                .map_err(|e| e.to_string()),
        }
    }
}

/// Embedding axis of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EmbedSpec {
    Standard,
    Linear,
    Ntk { alpha: f64 },
}

impl EmbedSpec {
    pub fn label(&self) -> &'static str {
        match self {
            EmbedSpec::Standard => "standard",
            EmbedSpec::Linear => "linear",
            EmbedSpec::Ntk { .. } => "ntk",
        }
    }

    /// Concrete rotary config for one bucket. Linear interpolation maps the
    /// bucket back into the trained window with factor
    /// `ceil(bucket / window)`.
    pub fn rope_for(&self, base: &RopeConfig, bucket: usize, trained_window: usize) -> RopeConfig {
        match self {
            EmbedSpec::Standard => base.with_scheme(EmbedScheme::Standard),
            EmbedSpec::Linear => {
                let factor = bucket.div_ceil(trained_window).max(1) as f64;
                base.with_scheme(EmbedScheme::LinearInterp { factor })
            }
            EmbedSpec::Ntk { alpha } => base.with_scheme(EmbedScheme::NtkScaled { alpha: *alpha }),
        }
    }
}

impl FromStr for EmbedSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "standard" => Ok(EmbedSpec::Standard),
            "linear" => Ok(EmbedSpec::Linear),
            "ntk" => Ok(EmbedSpec::Ntk {
                alpha: DEFAULT_NTK_ALPHA,
            }),
            other => Err(format!("unknown embed scheme `{other}`")),
        }
    }
}

/// One sweep result row.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub scheme: String,
    pub delta: String,
    pub bucket: usize,
    pub n: usize,
    pub accuracy: f64,
}

/// Score `suite` over the cartesian grid of index deltas and embedding
/// schemes, one record per (scheme, delta, bucket). Samples are scored in
/// parallel; ordering of records is deterministic.
pub fn sweep(
    model: &TinyModel<f32>,
    suite: &[NeedleSample],
    deltas: &[EvalDelta],
    schemes: &[EmbedSpec],
) -> Result<Vec<EvalRecord>, ScoreError> {
    let window = model.trained_window();
    let mut by_bucket: BTreeMap<usize, Vec<&NeedleSample>> = BTreeMap::new();
    for s in suite {
        by_bucket.entry(s.length_bucket).or_default().push(s);
    }
    let mut records = Vec::new();
    for scheme in schemes {
        for delta in deltas {
            for (&bucket, samples) in &by_bucket {
                let rope = scheme.rope_for(&model.config().rope, bucket, window);
                let policy = delta.policy(window);
                let verdicts: Vec<Result<bool, ScoreError>> = samples
                    .par_iter()
                    .map(|sample| {
                        let assignment = assign_deltas(&sample.haystack, &policy)?;
                        let positions =
                            derive_positions(&sample.haystack, &assignment, policy.target)?;
                        score_sample_with_rope(model, *sample, &positions, Some(&rope))
                    })
                    .collect();
                let mut correct = 0usize;
                for (index, v) in verdicts.into_iter().enumerate() {
                    match v {
                        Ok(true) => correct += 1,
                        Ok(false) => {}
                        Err(e) => {
                            return Err(ScoreError::Sample {
                                bucket,
                                index,
                                source: Box::new(e),
                            })
                        }
                    }
                }
                records.push(EvalRecord {
                    scheme: scheme.label().to_string(),
                    delta: delta.to_string(),
                    bucket,
                    n: samples.len(),
                    accuracy: correct as f64 / samples.len() as f64,
                });
            }
        }
    }
    Ok(records)
}

/// CSV with header `scheme,delta,bucket,n,accuracy`.
pub fn write_records_csv<W: Write>(records: &[EvalRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "scheme,delta,bucket,n,accuracy")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.scheme, r.delta, r.bucket, r.n, r.accuracy
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::longmr::gen::gen_sample;
    use crate::longmr::{GenConfig, VocabLayout};
    use crate::tokenstream::Modality;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> GenConfig {
        GenConfig {
            length_bucket: 96,
            n_negatives: 2,
            needle_modality: Modality::Visual,
            image_tokens: (8, 16),
            text_run: (2, 6),
            needle_image_tokens: 4,
            vocab_size: 64,
            vocab: VocabLayout {
                filler_symbols: 40,
                key_symbols: 10,
                answer_symbols: 10,
            },
        }
    }

    fn uniform_positions(sample: &NeedleSample) -> PositionSequence {
        let a = assign_deltas(&sample.haystack, &DeltaPolicy::uniform()).unwrap();
        derive_positions(&sample.haystack, &a, DeltaTarget::Neither).unwrap()
    }

    /// Emits the true next token at every row.
    struct OracleModel;

    impl ScoringModel for OracleModel {
        fn sequence_logits(
            &self,
            stream: &TokenStream,
            _positions: &PositionSequence,
            _rope: Option<&RopeConfig>,
        ) -> Result<Array2<f32>, ModelError> {
            let n = stream.len();
            let v = stream.vocab_size() as usize;
            let mut logits = Array2::zeros((n, v));
            for i in 0..n.saturating_sub(1) {
                logits[[i, stream.tokens()[i + 1].symbol_id as usize]] = 1.0;
            }
            Ok(logits)
        }

        fn trained_window(&self) -> usize {
            512
        }
    }

    /// Seeded random logits, varying per sample via a content hash.
    pub(crate) struct RandomModel {
        pub seed: u64,
    }

    impl ScoringModel for RandomModel {
        fn sequence_logits(
            &self,
            stream: &TokenStream,
            _positions: &PositionSequence,
            _rope: Option<&RopeConfig>,
        ) -> Result<Array2<f32>, ModelError> {
            let mut h = self.seed;
            for t in stream.tokens() {
                h = crate::tinyformer::splitmix64(h ^ t.symbol_id as u64);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            let n = stream.len();
            let v = stream.vocab_size() as usize;
            Ok(Array2::from_shape_fn((n, v), |_| {
                rng.random_range(-1.0f32..1.0)
            }))
        }

        fn trained_window(&self) -> usize {
            512
        }
    }

    #[test]
    fn oracle_model_scores_perfectly() {
        for seed in 0..10 {
            let sample = gen_sample(&cfg(), seed).unwrap();
            let positions = uniform_positions(&sample);
            assert!(score_sample(&OracleModel, &sample, &positions).unwrap());
        }
    }

    #[test]
    fn scoring_is_deterministic() {
        let sample = gen_sample(&cfg(), 3).unwrap();
        let positions = uniform_positions(&sample);
        let model = RandomModel { seed: 9 };
        let a = score_sample(&model, &sample, &positions).unwrap();
        let b = score_sample(&model, &sample, &positions).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_model_accuracy_near_chance() {
        // Loose 3-sigma sanity bound at small n; the acceptance suite runs
        // the full 1000-sample version.
        let n = 200;
        let model = RandomModel { seed: 17 };
        let mut correct = 0;
        for seed in 0..n {
            let sample = gen_sample(&cfg(), seed).unwrap();
            let positions = uniform_positions(&sample);
            if score_sample(&model, &sample, &positions).unwrap() {
                correct += 1;
            }
        }
        let p = 1.0 / 64.0;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let acc = correct as f64 / n as f64;
        assert!(
            (acc - p).abs() <= 4.0 * sigma,
            "accuracy {acc} too far from {p}"
        );
    }

    #[test]
    fn sweep_grid_shape() {
        let sample_cfg = cfg();
        let suite = crate::longmr::make_suite(&[96, 128], 4, &sample_cfg, 5).unwrap();
        let model = tiny_model();
        let deltas = [
            EvalDelta::Uniform,
            EvalDelta::Fixed("1/4".parse().unwrap()),
        ];
        let schemes = [EmbedSpec::Standard, EmbedSpec::Linear];
        let records = sweep(&model, &suite, &deltas, &schemes).unwrap();
        // 2 schemes x 2 deltas x 2 buckets.
        assert_eq!(records.len(), 8);
        for r in &records {
            assert_eq!(r.n, 4);
            assert!((0.0..=1.0).contains(&r.accuracy));
        }
        let mut csv = Vec::new();
        write_records_csv(&records, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("scheme,delta,bucket,n,accuracy\n"));
        assert_eq!(text.lines().count(), 9);
    }

    #[test]
    fn linear_factor_follows_bucket() {
        let base = RopeConfig::standard(8, 1e4);
        let spec = EmbedSpec::Linear;
        match spec.rope_for(&base, 64, 512).scheme {
            EmbedScheme::LinearInterp { factor } => assert_eq!(factor, 1.0),
            other => panic!("unexpected scheme {other:?}"),
        }
        match spec.rope_for(&base, 1024, 512).scheme {
            EmbedScheme::LinearInterp { factor } => assert_eq!(factor, 2.0),
            other => panic!("unexpected scheme {other:?}"),
        }
        match spec.rope_for(&base, 1025, 512).scheme {
            EmbedScheme::LinearInterp { factor } => assert_eq!(factor, 3.0),
            other => panic!("unexpected scheme {other:?}"),
        }
    }

    fn tiny_model() -> TinyModel<f32> {
        let config = crate::tinyformer::TinyModelConfig {
            layers: 1,
            heads: 2,
            head_dim: 4,
            vocab_size: 64,
            max_trained_window: 512,
            rope: RopeConfig::standard(4, 1e4),
            seed: 0,
        };
        TinyModel::new(config).unwrap()
    }

    #[test]
    fn parse_eval_axes() {
        assert_eq!("uniform".parse::<EvalDelta>().unwrap(), EvalDelta::Uniform);
        assert_eq!(
            "1/16".parse::<EvalDelta>().unwrap(),
            EvalDelta::Fixed("1/16".parse().unwrap())
        );
        assert_eq!(
            "adaptive".parse::<EvalDelta>().unwrap(),
            EvalDelta::Adaptive
        );
        assert!("bogus".parse::<EvalDelta>().is_err());
        assert_eq!("ntk".parse::<EmbedSpec>().unwrap(), EmbedSpec::Ntk { alpha: 5.0 });
        assert!("rope2".parse::<EmbedSpec>().is_err());
    }
}
