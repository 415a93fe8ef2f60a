//! Experiment configuration file (TOML).
//!
//! One file drives generation, training, evaluation, and sweeps. Every seed
//! is explicit, so each subcommand is reproducible from the config alone.
//! Rationals appear as `"1/256"` strings to avoid decimal drift.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::longmr::{EmbedSpec, EvalDelta, GenConfig, VocabLayout};
use crate::posembed::{RopeConfig, DEFAULT_ROPE_BASE};
use crate::posindex::{DeltaPolicy, DeltaTarget};
use crate::tinyformer::{TinyModelConfig, TrainSettings};
use crate::tokenstream::Modality;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab_size: u32,
    pub max_trained_window: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    pub seed: u64,
}

fn default_rope_base() -> f64 {
    DEFAULT_ROPE_BASE
}

impl ModelSection {
    pub fn model_config(&self) -> TinyModelConfig {
        TinyModelConfig {
            layers: self.layers,
            heads: self.heads,
            head_dim: self.head_dim,
            vocab_size: self.vocab_size,
            max_trained_window: self.max_trained_window,
            rope: RopeConfig::standard(self.head_dim, self.rope_base),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeedleKind {
    Visual,
    Textual,
}

impl From<NeedleKind> for Modality {
    fn from(k: NeedleKind) -> Modality {
        match k {
            NeedleKind::Visual => Modality::Visual,
            NeedleKind::Textual => Modality::Textual,
        }
    }
}

/// Generator shape shared by training pools and evaluation suites.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub n_negatives: usize,
    pub needle: NeedleKind,
    pub image_tokens: (usize, usize),
    pub text_run: (usize, usize),
    pub needle_image_tokens: usize,
    pub filler_symbols: u32,
    pub key_symbols: u32,
    pub answer_symbols: u32,
}

impl DataSection {
    pub fn gen_config(&self, vocab_size: u32, length_bucket: usize) -> GenConfig {
        GenConfig {
            length_bucket,
            n_negatives: self.n_negatives,
            needle_modality: self.needle.into(),
            image_tokens: self.image_tokens,
            text_run: self.text_run,
            needle_image_tokens: self.needle_image_tokens,
            vocab_size,
            vocab: VocabLayout {
                filler_symbols: self.filler_symbols,
                key_symbols: self.key_symbols,
                answer_symbols: self.answer_symbols,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Length buckets of the training pool.
    pub buckets: Vec<usize>,
    pub pool_per_bucket: usize,
    pub data_seed: u64,
    pub delta_policy: DeltaPolicy,
}

impl TrainSection {
    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            steps: self.steps,
            batch: self.batch,
            learning_rate: self.learning_rate,
            warmup: self.warmup,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub buckets: Vec<usize>,
    pub per_bucket: usize,
    pub seed: u64,
    /// Index-scheme grid: `"uniform"`, `"adaptive"`, or rationals.
    pub deltas: Vec<String>,
    /// Embedding grid: `standard`, `linear`, `ntk`.
    pub schemes: Vec<String>,
}

impl EvalSection {
    pub fn parsed_deltas(&self) -> Result<Vec<EvalDelta>, ConfigError> {
        self.deltas
            .iter()
            .map(|s| s.parse().map_err(ConfigError::Invalid))
            .collect()
    }

    pub fn parsed_schemes(&self) -> Result<Vec<EmbedSpec>, ConfigError> {
        self.schemes
            .iter()
            .map(|s| s.parse().map_err(ConfigError::Invalid))
            .collect()
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model
            .model_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let layout = VocabLayout {
            filler_symbols: self.data.filler_symbols,
            key_symbols: self.data.key_symbols,
            answer_symbols: self.data.answer_symbols,
        };
        if layout.required_vocab() > self.model.vocab_size {
            return Err(ConfigError::Invalid(format!(
                "vocab layout needs {} symbols, model has {}",
                layout.required_vocab(),
                self.model.vocab_size
            )));
        }
        for buckets in [&self.train.buckets, &self.eval.buckets] {
            if buckets.is_empty() {
                return Err(ConfigError::Invalid("bucket list is empty".into()));
            }
            if buckets.windows(2).any(|w| w[0] >= w[1]) {
                return Err(ConfigError::Invalid(
                    "buckets must be strictly increasing".into(),
                ));
            }
        }
        self.eval.parsed_deltas()?;
        self.eval.parsed_schemes()?;
        Ok(())
    }

    /// A ready-to-run desk-scale experiment; `v2pe init` writes this out.
    pub fn example() -> Self {
        ExperimentConfig {
            out_dir: PathBuf::from("out"),
            model: ModelSection {
                layers: 2,
                heads: 4,
                head_dim: 16,
                vocab_size: 64,
                max_trained_window: 512,
                rope_base: DEFAULT_ROPE_BASE,
                seed: 1,
            },
            data: DataSection {
                n_negatives: 2,
                needle: NeedleKind::Visual,
                image_tokens: (16, 64),
                text_run: (2, 8),
                needle_image_tokens: 4,
                filler_symbols: 40,
                key_symbols: 10,
                answer_symbols: 10,
            },
            train: TrainSection {
                steps: 600,
                batch: 8,
                learning_rate: 1e-3,
                warmup: 60,
                weight_decay: 0.01,
                grad_clip: Some(1.0),
                seed: 11,
                buckets: vec![128, 256, 512],
                pool_per_bucket: 256,
                data_seed: 21,
                delta_policy: DeltaPolicy::variable(7, DeltaTarget::VisualOnly),
            },
            eval: EvalSection {
                buckets: vec![512, 1024, 2048],
                per_bucket: 50,
                seed: 99,
                deltas: vec![
                    "uniform".into(),
                    "1".into(),
                    "1/16".into(),
                    "1/256".into(),
                    "adaptive".into(),
                ],
                schemes: vec!["standard".into(), "linear".into(), "ntk".into()],
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_validates() {
        ExperimentConfig::example().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        let cfg = ExperimentConfig::example();
        let text = cfg.to_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        // And once more through the printer.
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn rejects_vocab_overflow() {
        let mut cfg = ExperimentConfig::example();
        cfg.data.filler_symbols = 60;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_unsorted_buckets() {
        let mut cfg = ExperimentConfig::example();
        cfg.eval.buckets = vec![512, 512];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_bad_delta_string() {
        let mut cfg = ExperimentConfig::example();
        cfg.eval.deltas = vec!["1/3".into()];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn delta_policy_toml_forms() {
        let text = r#"
            mode = "variable"
            seed = 7
            target = "visual-only"
        "#;
        let p: DeltaPolicy = toml::from_str(text).unwrap();
        assert_eq!(p, DeltaPolicy::variable(7, DeltaTarget::VisualOnly));

        let text = r#"
            mode = "fixed"
            delta = "1/16"
            target = "both"
        "#;
        let p: DeltaPolicy = toml::from_str(text).unwrap();
        assert_eq!(
            p,
            DeltaPolicy::fixed("1/16".parse().unwrap(), DeltaTarget::Both)
        );
    }
}
