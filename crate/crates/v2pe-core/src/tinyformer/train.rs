//! AdamW training loop over synthetic retrieval sequences.
//!
//! Fully determined by (model seed, data-order seed, delta-policy seed):
//! batches are drawn by a seeded generator, and when the delta policy is
//! variable, each sequence re-derives its per-image deltas from a seed mixed
//! with a monotone sequence counter, so every sequence in every step draws
//! fresh increments.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{BatchItem, TinyModel};
use super::{ModelError, Real, Span, TinyModelConfig};
use crate::posindex::{assign_deltas, derive_positions, DeltaPolicy};
use crate::tokenstream::TokenStream;

/// One training sequence: the answer span is what the loss targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainExample {
    pub stream: TokenStream,
    pub answer_span: Span,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    /// Seed for batch sampling (independent of the model-init seed).
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 500,
            batch: 8,
            learning_rate: 3e-3,
            warmup: 50,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Per-sequence image deltas drawn this step, as rational strings.
    pub deltas: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// SplitMix64 — used to derive independent per-sequence seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    fn new(block_sizes: &[usize], weight_decay: f64) -> Self {
        AdamW {
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
        }
    }

    fn step<T: Real>(
        &mut self,
        t: usize,
        lr: f64,
        params: &mut [(String, &mut [T])],
        grads: &[(String, &[T])],
    ) {
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for (bi, ((name, w), (_, g))) in params.iter_mut().zip(grads.iter()).enumerate() {
            // Decoupled weight decay on matrices only.
            let decay = if name.contains("norm") {
                0.0
            } else {
                self.weight_decay
            };
            let (m, v) = (&mut self.m[bi], &mut self.v[bi]);
            for i in 0..w.len() {
                let gi = g[i].to_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let mut x = w[i].to_f64();
                x -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * x);
                w[i] = T::from_f64(x);
            }
        }
    }
}

/// Linear warmup then cosine decay to 10% of the peak rate.
fn lr_at(step: usize, settings: &TrainSettings) -> f64 {
    let peak = settings.learning_rate;
    if step < settings.warmup {
        return peak * (step + 1) as f64 / settings.warmup as f64;
    }
    let span = (settings.steps - settings.warmup).max(1) as f64;
    let progress = (step - settings.warmup) as f64 / span;
    let floor = 0.1 * peak;
    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Train a fresh `f32` model on `dataset` under `policy`.
///
/// Returns the trained model and a per-step log of (loss, sampled deltas).
/// Zero steps returns the initialized model unchanged. A non-finite loss
/// aborts with the failing step index.
pub fn train(
    config: &TinyModelConfig,
    settings: &TrainSettings,
    dataset: &[TrainExample],
    policy: &DeltaPolicy,
) -> Result<(TinyModel<f32>, TrainLog), ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut model = TinyModel::<f32>::new(*config)?;
    let mut log = TrainLog::default();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let block_sizes: Vec<usize> = model.blocks().iter().map(|(_, b)| b.len()).collect();
    let mut opt = AdamW::new(&block_sizes, settings.weight_decay);
    let policy_seed = match &policy.mode {
        crate::posindex::DeltaMode::Variable { seed, .. } => *seed,
        _ => 0,
    };
    let mut seq_counter: u64 = 0;

    for step in 0..settings.steps {
        let mut positions = Vec::with_capacity(settings.batch);
        let mut chosen = Vec::with_capacity(settings.batch);
        let mut step_deltas = Vec::with_capacity(settings.batch);
        for _ in 0..settings.batch {
            let idx = batch_rng.random_range(0..dataset.len() as u64) as usize;
            let example = &dataset[idx];
            let seq_policy = policy.reseeded(splitmix64(policy_seed ^ seq_counter));
            seq_counter += 1;
            let assignment = assign_deltas(&example.stream, &seq_policy)
                .map_err(|e| ModelError::Config(e.to_string()))?;
            step_deltas.push(
                assignment
                    .image_deltas()
                    .iter()
                    .map(|d| d.to_string())
                    .collect(),
            );
            let pos = derive_positions(&example.stream, &assignment, seq_policy.target)
                .map_err(|e| ModelError::Config(e.to_string()))?;
            positions.push(pos);
            chosen.push(idx);
        }
        let batch: Vec<BatchItem> = chosen
            .iter()
            .zip(&positions)
            .map(|(&idx, pos)| BatchItem {
                stream: &dataset[idx].stream,
                positions: pos,
                answer_span: dataset[idx].answer_span,
            })
            .collect();

        let (loss, mut grads) = model.loss_and_grads(&batch)?;
        if !loss.is_finite() {
            return Err(ModelError::TrainingDiverged { step });
        }
        if let Some(clip) = settings.grad_clip {
            clip_global_norm(&mut grads, clip);
        }
        let lr = lr_at(step, settings);
        let grad_blocks = grads.blocks();
        let mut params = model.blocks_mut();
        opt.step(step + 1, lr, &mut params, &grad_blocks);
        drop(params);
        log.records.push(StepRecord {
            step,
            loss,
            deltas: step_deltas,
        });
    }
    Ok((model, log))
}

fn clip_global_norm<T: Real>(grads: &mut super::model::Gradients<T>, max_norm: f64) {
    let mut sq = 0.0;
    for (_, b) in grads.blocks() {
        for &x in b {
            sq += x.to_f64() * x.to_f64();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        grads.scale(T::from_f64(max_norm / norm));
    }
}
