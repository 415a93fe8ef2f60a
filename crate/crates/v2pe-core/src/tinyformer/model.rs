//! Model parameters, forward pass, and the hand-written backward pass.

use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{ModelError, Real, Span, TinyModelConfig};
use crate::posembed::{rope_angles, RopeConfig};
use crate::posindex::PositionSequence;
use crate::tokenstream::TokenStream;

const RMS_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub(crate) struct LayerParams<T> {
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub fc1: Array2<T>,
    pub fc2: Array2<T>,
    pub norm_attn: Array1<T>,
    pub norm_mlp: Array1<T>,
}

/// Decoder-only transformer with rotary attention at real-valued positions.
///
/// Textual and visual tokens share one embedding table; the positional
/// mechanism under test only sees position indices, so a vision encoder
/// would add nothing here.
#[derive(Debug, Clone)]
pub struct TinyModel<T> {
    config: TinyModelConfig,
    embed: Array2<T>,
    layers: Vec<LayerParams<T>>,
    norm_out: Array1<T>,
    head: Array2<T>,
}

/// Gradients for every parameter block, in model layout.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    embed: Array2<T>,
    layers: Vec<LayerGrads<T>>,
    norm_out: Array1<T>,
    head: Array2<T>,
}

#[derive(Debug, Clone)]
struct LayerGrads<T> {
    wq: Array2<T>,
    wk: Array2<T>,
    wv: Array2<T>,
    wo: Array2<T>,
    fc1: Array2<T>,
    fc2: Array2<T>,
    norm_attn: Array1<T>,
    norm_mlp: Array1<T>,
}

/// One training sequence with positions and the span the loss applies to.
pub struct BatchItem<'a> {
    pub stream: &'a TokenStream,
    pub positions: &'a PositionSequence,
    pub answer_span: Span,
}

/// Per-token rotation coefficients (cos/sin per frequency).
struct RotationTable<T> {
    cos: Array2<T>,
    sin: Array2<T>,
}

impl<T: Real> RotationTable<T> {
    fn build(rope: &RopeConfig, positions: &[f64]) -> Self {
        let half = rope.head_dim / 2;
        let mut cos = Array2::zeros((positions.len(), half));
        let mut sin = Array2::zeros((positions.len(), half));
        for (i, &p) in positions.iter().enumerate() {
            for (j, theta) in rope_angles(rope, p).into_iter().enumerate() {
                let (s, c) = theta.sin_cos();
                cos[[i, j]] = T::from_f64(c);
                sin[[i, j]] = T::from_f64(s);
            }
        }
        RotationTable { cos, sin }
    }
}

struct LayerCache<T> {
    x_in: Array2<T>,
    inv_rms_attn: Array1<T>,
    normed_attn: Array2<T>,
    q_rot: Array2<T>,
    k_rot: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
    x_mid: Array2<T>,
    inv_rms_mlp: Array1<T>,
    normed_mlp: Array2<T>,
    fc1_out: Array2<T>,
    act: Array2<T>,
}

struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    x_final: Array2<T>,
    inv_rms_out: Array1<T>,
    normed_out: Array2<T>,
}

enum PassMode {
    Infer,
    Record,
    CaptureAttn(usize),
}

fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (T::zero() - x).exp())
}

fn silu_prime<T: Real>(x: T) -> T {
    let sig = T::one() / (T::one() + (T::zero() - x).exp());
    sig * (T::one() + x * (T::one() - sig))
}

/// Row-wise RMS norm with gain: returns `(x * inv_rms(x)) ⊙ g` and the
/// per-row inverse RMS.
fn rmsnorm_gain<T: Real>(x: &Array2<T>, g: &Array1<T>) -> (Array2<T>, Array1<T>) {
    let (n, w) = x.dim();
    let mut out = Array2::zeros((n, w));
    let mut inv_rms = Array1::zeros(n);
    for i in 0..n {
        let mut ms = T::zero();
        for c in 0..w {
            ms = ms + x[[i, c]] * x[[i, c]];
        }
        let inv = (ms / T::from_f64(w as f64) + T::from_f64(RMS_EPS)).sqrt().recip();
        inv_rms[i] = inv;
        for c in 0..w {
            out[[i, c]] = x[[i, c]] * inv * g[c];
        }
    }
    (out, inv_rms)
}

/// Backward of `rmsnorm_gain`: accumulates the gain gradient into `dg` and
/// returns the input gradient.
fn rmsnorm_backward<T: Real>(
    dy: &Array2<T>,
    x: &Array2<T>,
    inv_rms: &Array1<T>,
    g: &Array1<T>,
    dg: &mut Array1<T>,
) -> Array2<T> {
    let (n, w) = x.dim();
    let mut dx = Array2::zeros((n, w));
    let wf = T::from_f64(w as f64);
    for i in 0..n {
        let inv = inv_rms[i];
        let mut dot = T::zero();
        for c in 0..w {
            dg[c] = dg[c] + dy[[i, c]] * x[[i, c]] * inv;
            dot = dot + dy[[i, c]] * g[c] * x[[i, c]];
        }
        let k = inv * inv * inv * dot / wf;
        for c in 0..w {
            dx[[i, c]] = inv * dy[[i, c]] * g[c] - k * x[[i, c]];
        }
    }
    dx
}

/// In-place causal softmax: row `i` is normalized over columns `0..=i`,
/// later columns are zeroed.
fn softmax_causal<T: Real>(scores: &mut Array2<T>) {
    let n = scores.nrows();
    for i in 0..n {
        let mut row = scores.row_mut(i);
        let mut max = T::neg_infinity();
        for j in 0..=i {
            if row[j] > max {
                max = row[j];
            }
        }
        let mut sum = T::zero();
        for j in 0..=i {
            let e = (row[j] - max).exp();
            row[j] = e;
            sum = sum + e;
        }
        for j in 0..=i {
            row[j] = row[j] / sum;
        }
        for j in i + 1..n {
            row[j] = T::zero();
        }
    }
}

/// Row-wise softmax backward: `ds = p ⊙ (dp − (dp·p))`. Masked entries have
/// `p = 0`, so their gradient vanishes automatically.
fn softmax_backward<T: Real>(probs: &Array2<T>, dprobs: &Array2<T>) -> Array2<T> {
    let (n, m) = probs.dim();
    let mut ds = Array2::zeros((n, m));
    for i in 0..n {
        let mut dot = T::zero();
        for j in 0..m {
            dot = dot + dprobs[[i, j]] * probs[[i, j]];
        }
        for j in 0..m {
            ds[[i, j]] = probs[[i, j]] * (dprobs[[i, j]] - dot);
        }
    }
    ds
}

impl<T: Real> TinyModel<T> {
    /// Initialize deterministically from the config seed. Output-side
    /// projections (`wo`, `fc2`) start at zero so the residual stream is the
    /// identity at step 0.
    pub fn new(config: TinyModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let w = config.width();
        let h = config.hidden();
        let v = config.vocab_size as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let randn = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let mut m = Array2::zeros((rows, cols));
            for x in m.iter_mut() {
                *x = T::from_f64(normal.sample(rng));
            }
            m
        };
        let embed = randn(v, w, &mut rng);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerParams {
                wq: randn(w, w, &mut rng),
                wk: randn(w, w, &mut rng),
                wv: randn(w, w, &mut rng),
                wo: Array2::zeros((w, w)),
                fc1: randn(h, w, &mut rng),
                fc2: Array2::zeros((w, h)),
                norm_attn: Array1::ones(w),
                norm_mlp: Array1::ones(w),
            });
        }
        let head = randn(v, w, &mut rng);
        Ok(TinyModel {
            config,
            embed,
            layers,
            norm_out: Array1::ones(w),
            head,
        })
    }

    /// All-zero parameter skeleton (checkpoint loading target).
    pub(crate) fn zeroed(config: TinyModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let w = config.width();
        let h = config.hidden();
        let v = config.vocab_size as usize;
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                wq: Array2::zeros((w, w)),
                wk: Array2::zeros((w, w)),
                wv: Array2::zeros((w, w)),
                wo: Array2::zeros((w, w)),
                fc1: Array2::zeros((h, w)),
                fc2: Array2::zeros((w, h)),
                norm_attn: Array1::zeros(w),
                norm_mlp: Array1::zeros(w),
            })
            .collect();
        Ok(TinyModel {
            config,
            embed: Array2::zeros((v, w)),
            layers,
            norm_out: Array1::zeros(w),
            head: Array2::zeros((v, w)),
        })
    }

    pub fn config(&self) -> &TinyModelConfig {
        &self.config
    }

    /// Named flat views of every parameter block, in a fixed order shared
    /// with [`Gradients::blocks`], the optimizer, and the checkpoint format.
    pub fn blocks(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = Vec::new();
        out.push(("embed".into(), self.embed.as_slice().unwrap()));
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.wq"), l.wq.as_slice().unwrap()));
            out.push((format!("layer{i}.wk"), l.wk.as_slice().unwrap()));
            out.push((format!("layer{i}.wv"), l.wv.as_slice().unwrap()));
            out.push((format!("layer{i}.wo"), l.wo.as_slice().unwrap()));
            out.push((format!("layer{i}.fc1"), l.fc1.as_slice().unwrap()));
            out.push((format!("layer{i}.fc2"), l.fc2.as_slice().unwrap()));
            out.push((format!("layer{i}.norm_attn"), l.norm_attn.as_slice().unwrap()));
            out.push((format!("layer{i}.norm_mlp"), l.norm_mlp.as_slice().unwrap()));
        }
        out.push(("norm_out".into(), self.norm_out.as_slice().unwrap()));
        out.push(("head".into(), self.head.as_slice().unwrap()));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out: Vec<(String, &mut [T])> = Vec::new();
        out.push(("embed".into(), self.embed.as_slice_mut().unwrap()));
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.wq"), l.wq.as_slice_mut().unwrap()));
            out.push((format!("layer{i}.wk"), l.wk.as_slice_mut().unwrap()));
            out.push((format!("layer{i}.wv"), l.wv.as_slice_mut().unwrap()));
            out.push((format!("layer{i}.wo"), l.wo.as_slice_mut().unwrap()));
            out.push((format!("layer{i}.fc1"), l.fc1.as_slice_mut().unwrap()));
            out.push((format!("layer{i}.fc2"), l.fc2.as_slice_mut().unwrap()));
            out.push((format!("layer{i}.norm_attn"), l.norm_attn.as_slice_mut().unwrap()));
            out.push((format!("layer{i}.norm_mlp"), l.norm_mlp.as_slice_mut().unwrap()));
        }
        out.push(("norm_out".into(), self.norm_out.as_slice_mut().unwrap()));
        out.push(("head".into(), self.head.as_slice_mut().unwrap()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    /// Look up token embeddings (shared table for both modalities).
    pub fn embed_tokens(&self, stream: &TokenStream) -> Result<Array2<T>, ModelError> {
        if stream.vocab_size() > self.config.vocab_size {
            return Err(ModelError::Config(format!(
                "stream vocabulary {} exceeds model vocabulary {}",
                stream.vocab_size(),
                self.config.vocab_size
            )));
        }
        let w = self.config.width();
        let mut out = Array2::zeros((stream.len(), w));
        for (i, tok) in stream.tokens().iter().enumerate() {
            out.row_mut(i).assign(&self.embed.row(tok.symbol_id as usize));
        }
        Ok(out)
    }

    fn check_positions(
        &self,
        n_tokens: usize,
        positions: &PositionSequence,
    ) -> Result<(), ModelError> {
        if positions.len() != n_tokens {
            return Err(ModelError::LengthMismatch {
                positions: positions.len(),
                tokens: n_tokens,
            });
        }
        Ok(())
    }

    /// Causal forward pass; logits are `N x vocab`.
    pub fn forward(
        &self,
        stream: &TokenStream,
        positions: &PositionSequence,
    ) -> Result<Array2<T>, ModelError> {
        self.forward_with_rope(stream, positions, &self.config.rope)
    }

    /// Forward with an overriding rotary config (evaluation sweeps swap in
    /// interpolated or NTK-scaled embeddings without retraining).
    pub fn forward_with_rope(
        &self,
        stream: &TokenStream,
        positions: &PositionSequence,
        rope: &RopeConfig,
    ) -> Result<Array2<T>, ModelError> {
        self.check_positions(stream.len(), positions)?;
        let embeds = self.embed_tokens(stream)?;
        let rot = RotationTable::build(rope, positions.values());
        let (logits, _, _) = self.pass(embeds, &rot, PassMode::Infer);
        Ok(logits)
    }

    /// Forward from externally supplied embeddings (token-compression path).
    pub fn forward_embedded(
        &self,
        embeds: Array2<T>,
        positions: &PositionSequence,
    ) -> Result<Array2<T>, ModelError> {
        let (n, w) = embeds.dim();
        if w != self.config.width() || n != positions.len() {
            return Err(ModelError::EmbedShape {
                rows: n,
                cols: w,
                expected_rows: positions.len(),
                expected_cols: self.config.width(),
            });
        }
        let rot = RotationTable::build(&self.config.rope, positions.values());
        let (logits, _, _) = self.pass(embeds, &rot, PassMode::Infer);
        Ok(logits)
    }

    fn pass(
        &self,
        embeds: Array2<T>,
        rot: &RotationTable<T>,
        mode: PassMode,
    ) -> (Array2<T>, Option<ForwardCache<T>>, Option<Vec<Array2<T>>>) {
        let n = embeds.nrows();
        let heads = self.config.heads;
        let dh = self.config.head_dim;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let record = matches!(mode, PassMode::Record);
        let mut captured: Option<Vec<Array2<T>>> = None;
        let mut caches: Vec<LayerCache<T>> = Vec::new();

        let mut x = embeds;
        for (li, layer) in self.layers.iter().enumerate() {
            let (normed_attn, inv_rms_attn) = rmsnorm_gain(&x, &layer.norm_attn);
            let mut q = normed_attn.dot(&layer.wq.t());
            let mut k = normed_attn.dot(&layer.wk.t());
            let v = normed_attn.dot(&layer.wv.t());
            // Rotary applies per head; the table is per head_dim, shared.
            for h in 0..heads {
                let c0 = h * dh;
                let mut qh = q.slice_mut(s![.., c0..c0 + dh]);
                rotate_view(&mut qh, rot, false);
                let mut kh = k.slice_mut(s![.., c0..c0 + dh]);
                rotate_view(&mut kh, rot, false);
            }
            let mut ctx = Array2::zeros((n, heads * dh));
            let mut probs_cache: Vec<Array2<T>> = Vec::new();
            let capture_here = matches!(mode, PassMode::CaptureAttn(l) if l == li);
            for h in 0..heads {
                let c0 = h * dh;
                let qh = q.slice(s![.., c0..c0 + dh]);
                let kh = k.slice(s![.., c0..c0 + dh]);
                let vh = v.slice(s![.., c0..c0 + dh]);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|x| x * scale);
                softmax_causal(&mut scores);
                let ctx_h = scores.dot(&vh);
                ctx.slice_mut(s![.., c0..c0 + dh]).assign(&ctx_h);
                if record || capture_here {
                    probs_cache.push(scores);
                }
            }
            if capture_here {
                captured = Some(std::mem::take(&mut probs_cache));
            }
            let attn_out = ctx.dot(&layer.wo.t());
            let x_mid = &x + &attn_out;
            let (normed_mlp, inv_rms_mlp) = rmsnorm_gain(&x_mid, &layer.norm_mlp);
            let fc1_out = normed_mlp.dot(&layer.fc1.t());
            let act = fc1_out.mapv(silu);
            let mlp_out = act.dot(&layer.fc2.t());
            let x_out = &x_mid + &mlp_out;
            if record {
                caches.push(LayerCache {
                    x_in: x,
                    inv_rms_attn,
                    normed_attn,
                    q_rot: q,
                    k_rot: k,
                    v,
                    probs: probs_cache,
                    ctx,
                    x_mid,
                    inv_rms_mlp,
                    normed_mlp,
                    fc1_out,
                    act,
                });
            }
            x = x_out;
        }
        let (normed_out, inv_rms_out) = rmsnorm_gain(&x, &self.norm_out);
        let logits = normed_out.dot(&self.head.t());
        let cache = record.then(|| ForwardCache {
            layers: caches,
            x_final: x,
            inv_rms_out,
            normed_out,
        });
        (logits, cache, captured)
    }

    fn validate_span(&self, item: &BatchItem) -> Result<(), ModelError> {
        self.check_positions(item.stream.len(), item.positions)?;
        let span = item.answer_span;
        if span.len == 0 || span.start == 0 {
            return Err(ModelError::EmptyTargetSpan);
        }
        if span.end() > item.stream.len() {
            return Err(ModelError::SpanOutOfRange {
                start: span.start,
                end: span.end(),
                len: item.stream.len(),
            });
        }
        Ok(())
    }

    /// Mean cross-entropy over the batch's answer spans, without gradients.
    pub fn batch_loss(&self, batch: &[BatchItem]) -> Result<f64, ModelError> {
        let mut total = 0.0;
        let mut count = 0usize;
        for item in batch {
            self.validate_span(item)?;
            let logits = self.forward(item.stream, item.positions)?;
            let (loss, n) = span_loss(&logits, item);
            total += loss;
            count += n;
        }
        Ok(total / count as f64)
    }

    /// Cross-entropy over answer spans plus gradients for every parameter.
    ///
    /// Each sequence's logit at span position `p-1` is trained to predict
    /// the token at `p`. Items are processed in parallel; the reduction is
    /// ordered, so results are deterministic.
    pub fn loss_and_grads(&self, batch: &[BatchItem]) -> Result<(f64, Gradients<T>), ModelError> {
        for item in batch {
            self.validate_span(item)?;
        }
        let per_item: Vec<(f64, usize, Gradients<T>)> = batch
            .par_iter()
            .map(|item| self.item_grads(item))
            .collect::<Result<_, _>>()?;
        let total_targets: usize = per_item.iter().map(|(_, n, _)| n).sum();
        let mut grads = Gradients::zeros(&self.config);
        let mut loss_sum = 0.0;
        for (loss, _, g) in per_item {
            loss_sum += loss;
            grads.add_assign(&g);
        }
        grads.scale(T::from_f64(1.0 / total_targets as f64));
        Ok((loss_sum / total_targets as f64, grads))
    }

    fn item_grads(&self, item: &BatchItem) -> Result<(f64, usize, Gradients<T>), ModelError> {
        let embeds = self.embed_tokens(item.stream)?;
        let rot = RotationTable::build(&self.config.rope, item.positions.values());
        let (logits, cache, _) = self.pass(embeds, &rot, PassMode::Record);
        let cache = cache.expect("record mode returns a cache");

        let (n, v) = logits.dim();
        let mut dlogits = Array2::zeros((n, v));
        let mut loss = 0.0;
        let span = item.answer_span;
        for k in 0..span.len {
            let row = span.start + k - 1;
            let target = item.stream.tokens()[span.start + k].symbol_id as usize;
            let p = softmax_f64(&logits, row);
            loss -= p[target].max(f64::MIN_POSITIVE).ln();
            for c in 0..v {
                let delta = if c == target { 1.0 } else { 0.0 };
                dlogits[[row, c]] = T::from_f64(p[c] - delta);
            }
        }
        let grads = self.backward(item.stream, &rot, &cache, &dlogits);
        Ok((loss, span.len, grads))
    }

    fn backward(
        &self,
        stream: &TokenStream,
        rot: &RotationTable<T>,
        cache: &ForwardCache<T>,
        dlogits: &Array2<T>,
    ) -> Gradients<T> {
        let mut grads = Gradients::zeros(&self.config);
        let heads = self.config.heads;
        let dh = self.config.head_dim;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        grads.head = dlogits.t().dot(&cache.normed_out);
        let dnormed_out = dlogits.dot(&self.head);
        let mut dx = rmsnorm_backward(
            &dnormed_out,
            &cache.x_final,
            &cache.inv_rms_out,
            &self.norm_out,
            &mut grads.norm_out,
        );

        for (li, layer) in self.layers.iter().enumerate().rev() {
            let lc = &cache.layers[li];
            let lg = &mut grads.layers[li];

            // MLP branch.
            let dact = dx.dot(&layer.fc2);
            lg.fc2 = dx.t().dot(&lc.act);
            let mut dpre = dact;
            ndarray::Zip::from(&mut dpre)
                .and(&lc.fc1_out)
                .for_each(|d, &x| *d = *d * silu_prime(x));
            let dnormed_mlp = dpre.dot(&layer.fc1);
            lg.fc1 = dpre.t().dot(&lc.normed_mlp);
            let dx_mid_norm = rmsnorm_backward(
                &dnormed_mlp,
                &lc.x_mid,
                &lc.inv_rms_mlp,
                &layer.norm_mlp,
                &mut lg.norm_mlp,
            );
            let dx_mid = &dx + &dx_mid_norm;

            // Attention branch.
            let dctx = dx_mid.dot(&layer.wo);
            lg.wo = dx_mid.t().dot(&lc.ctx);
            let n = dctx.nrows();
            let mut dq = Array2::zeros((n, heads * dh));
            let mut dk = Array2::zeros((n, heads * dh));
            let mut dv = Array2::zeros((n, heads * dh));
            for h in 0..heads {
                let c0 = h * dh;
                let dctx_h = dctx.slice(s![.., c0..c0 + dh]);
                let probs = &lc.probs[h];
                let vh = lc.v.slice(s![.., c0..c0 + dh]);
                let dprobs = dctx_h.dot(&vh.t());
                dv.slice_mut(s![.., c0..c0 + dh])
                    .assign(&probs.t().dot(&dctx_h));
                let mut dscores = softmax_backward(probs, &dprobs);
                dscores.mapv_inplace(|x| x * scale);
                let qh = lc.q_rot.slice(s![.., c0..c0 + dh]);
                let kh = lc.k_rot.slice(s![.., c0..c0 + dh]);
                let mut dq_h = dscores.dot(&kh);
                let mut dk_h = dscores.t().dot(&qh);
                // Undo the rotation: its transpose is the negative-angle map.
                let mut dq_view = dq_h.view_mut();
                rotate_view(&mut dq_view, rot, true);
                let mut dk_view = dk_h.view_mut();
                rotate_view(&mut dk_view, rot, true);
                dq.slice_mut(s![.., c0..c0 + dh]).assign(&dq_h);
                dk.slice_mut(s![.., c0..c0 + dh]).assign(&dk_h);
            }
            let mut dnormed_attn = dq.dot(&layer.wq);
            dnormed_attn = dnormed_attn + dk.dot(&layer.wk);
            dnormed_attn = dnormed_attn + dv.dot(&layer.wv);
            lg.wq = dq.t().dot(&lc.normed_attn);
            lg.wk = dk.t().dot(&lc.normed_attn);
            lg.wv = dv.t().dot(&lc.normed_attn);
            let dx_in_norm = rmsnorm_backward(
                &dnormed_attn,
                &lc.x_in,
                &lc.inv_rms_attn,
                &layer.norm_attn,
                &mut lg.norm_attn,
            );
            dx = &dx_mid + &dx_in_norm;
        }

        // Scatter token gradients into the embedding table.
        for (i, tok) in stream.tokens().iter().enumerate() {
            let row = tok.symbol_id as usize;
            for c in 0..self.config.width() {
                grads.embed[[row, c]] = grads.embed[[row, c]] + dx[[i, c]];
            }
        }
        grads
    }

    /// Per-head attention probabilities at one layer (rows sum to 1).
    pub fn attention_heads(
        &self,
        stream: &TokenStream,
        positions: &PositionSequence,
        layer: usize,
    ) -> Result<Vec<Array2<T>>, ModelError> {
        if layer >= self.config.layers {
            return Err(ModelError::LayerOutOfRange {
                layer,
                layers: self.config.layers,
            });
        }
        self.check_positions(stream.len(), positions)?;
        let embeds = self.embed_tokens(stream)?;
        let rot = RotationTable::build(&self.config.rope, positions.values());
        let (_, _, captured) = self.pass(embeds, &rot, PassMode::CaptureAttn(layer));
        Ok(captured.expect("capture mode returns attention"))
    }

    /// Attention over the last `tail_rows` query rows at one layer, reduced
    /// by element-wise max over heads.
    pub fn dump_attention(
        &self,
        stream: &TokenStream,
        positions: &PositionSequence,
        layer: usize,
        tail_rows: usize,
    ) -> Result<Array2<T>, ModelError> {
        let n = stream.len();
        if tail_rows > n {
            return Err(ModelError::TailRowsOutOfRange { tail_rows, len: n });
        }
        let heads = self.attention_heads(stream, positions, layer)?;
        let mut out = Array2::zeros((tail_rows, n));
        let first = n - tail_rows;
        for r in 0..tail_rows {
            for c in 0..n {
                let mut m = T::neg_infinity();
                for hp in &heads {
                    if hp[[first + r, c]] > m {
                        m = hp[[first + r, c]];
                    }
                }
                out[[r, c]] = m;
            }
        }
        Ok(out)
    }
}

/// Rotation on a mutable column-slice view (per-head q/k block).
fn rotate_view<T: Real>(
    m: &mut ndarray::ArrayViewMut2<T>,
    rot: &RotationTable<T>,
    inverse: bool,
) {
    let half = rot.cos.ncols();
    for i in 0..m.nrows() {
        for j in 0..half {
            let c = rot.cos[[i, j]];
            let s = if inverse {
                T::zero() - rot.sin[[i, j]]
            } else {
                rot.sin[[i, j]]
            };
            let a = m[[i, 2 * j]];
            let b = m[[i, 2 * j + 1]];
            m[[i, 2 * j]] = a * c - b * s;
            m[[i, 2 * j + 1]] = a * s + b * c;
        }
    }
}

fn softmax_f64<T: Real>(logits: &Array2<T>, row: usize) -> Vec<f64> {
    let r = logits.row(row);
    let max = r.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.to_f64()));
    let mut out: Vec<f64> = r.iter().map(|&x| (x.to_f64() - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for x in &mut out {
        *x /= sum;
    }
    out
}

fn span_loss<T: Real>(logits: &Array2<T>, item: &BatchItem) -> (f64, usize) {
    let span = item.answer_span;
    let mut loss = 0.0;
    for k in 0..span.len {
        let row = span.start + k - 1;
        let target = item.stream.tokens()[span.start + k].symbol_id as usize;
        let p = softmax_f64(logits, row);
        loss -= p[target].max(f64::MIN_POSITIVE).ln();
    }
    (loss, span.len)
}

impl<T: Real> Gradients<T> {
    pub fn zeros(config: &TinyModelConfig) -> Self {
        let w = config.width();
        let h = config.hidden();
        let v = config.vocab_size as usize;
        Gradients {
            embed: Array2::zeros((v, w)),
            layers: (0..config.layers)
                .map(|_| LayerGrads {
                    wq: Array2::zeros((w, w)),
                    wk: Array2::zeros((w, w)),
                    wv: Array2::zeros((w, w)),
                    wo: Array2::zeros((w, w)),
                    fc1: Array2::zeros((h, w)),
                    fc2: Array2::zeros((w, h)),
                    norm_attn: Array1::zeros(w),
                    norm_mlp: Array1::zeros(w),
                })
                .collect(),
            norm_out: Array1::zeros(w),
            head: Array2::zeros((v, w)),
        }
    }

    pub fn blocks(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = Vec::new();
        out.push(("embed".into(), self.embed.as_slice().unwrap()));
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.wq"), l.wq.as_slice().unwrap()));
            out.push((format!("layer{i}.wk"), l.wk.as_slice().unwrap()));
            out.push((format!("layer{i}.wv"), l.wv.as_slice().unwrap()));
            out.push((format!("layer{i}.wo"), l.wo.as_slice().unwrap()));
            out.push((format!("layer{i}.fc1"), l.fc1.as_slice().unwrap()));
            out.push((format!("layer{i}.fc2"), l.fc2.as_slice().unwrap()));
            out.push((format!("layer{i}.norm_attn"), l.norm_attn.as_slice().unwrap()));
            out.push((format!("layer{i}.norm_mlp"), l.norm_mlp.as_slice().unwrap()));
        }
        out.push(("norm_out".into(), self.norm_out.as_slice().unwrap()));
        out.push(("head".into(), self.head.as_slice().unwrap()));
        out
    }

    fn for_each_flat(&mut self, mut f: impl FnMut(&mut T)) {
        self.embed.iter_mut().for_each(&mut f);
        for l in &mut self.layers {
            l.wq.iter_mut().for_each(&mut f);
            l.wk.iter_mut().for_each(&mut f);
            l.wv.iter_mut().for_each(&mut f);
            l.wo.iter_mut().for_each(&mut f);
            l.fc1.iter_mut().for_each(&mut f);
            l.fc2.iter_mut().for_each(&mut f);
            l.norm_attn.iter_mut().for_each(&mut f);
            l.norm_mlp.iter_mut().for_each(&mut f);
        }
        self.norm_out.iter_mut().for_each(&mut f);
        self.head.iter_mut().for_each(&mut f);
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        let mut mine = self.blocks_flat_mut();
        let theirs = other.blocks();
        for ((_, a), (_, b)) in mine.iter_mut().zip(theirs.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x = *x + *y;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        self.for_each_flat(|x| *x = *x * factor);
    }

    fn blocks_flat_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out: Vec<(String, &mut [T])> = Vec::new();
        out.push(("embed".into(), self.embed.as_slice_mut().unwrap()));
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.wq"), l.wq.as_slice_mut().unwrap()));
            out.push((format!("layer{i}.wk"), l.wk.as_slice_mut().unwrap()));
            out.push((format!("layer{i}.wv"), l.wv.as_slice_mut().unwrap()));
            out.push((format!("layer{i}.wo"), l.wo.as_slice_mut().unwrap()));
            out.push((format!("layer{i}.fc1"), l.fc1.as_slice_mut().unwrap()));
            out.push((format!("layer{i}.fc2"), l.fc2.as_slice_mut().unwrap()));
            out.push((format!("layer{i}.norm_attn"), l.norm_attn.as_slice_mut().unwrap()));
            out.push((format!("layer{i}.norm_mlp"), l.norm_mlp.as_slice_mut().unwrap()));
        }
        out.push(("norm_out".into(), self.norm_out.as_slice_mut().unwrap()));
        out.push(("head".into(), self.head.as_slice_mut().unwrap()));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut [T])> {
        self.blocks_flat_mut()
    }
}
