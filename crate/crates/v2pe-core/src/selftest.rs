//! Headless invariant battery behind `v2pe selftest`.
//!
//! Fast spot-checks of the load-bearing properties: degeneration to the
//! uniform baseline, closed-form/recursion agreement, rotary shift
//! invariance, the adaptive window bound, gradient correctness on a micro
//! model, and the scoring protocol. The full-depth versions live in the
//! acceptance test suite; this runs in seconds and needs no test harness.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::longmr::{gen_sample, score_sample, GenConfig, ScoringModel, VocabLayout};
use crate::posembed::{apply_rope, rope_angles, EmbedScheme, RopeConfig};
use crate::posindex::{
    assign_deltas, derive_positions, max_position, max_position_exact, DeltaPolicy, DeltaTarget,
};
use crate::rational::Dyadic;
use crate::tinyformer::{BatchItem, Span, TinyModel, TinyModelConfig};
use crate::tokenstream::{Modality, StreamBuilder, TokenStream};

/// Random interleaved stream for property checks: a text prefix, then
/// alternating image blocks and text runs.
pub fn random_stream(rng: &mut ChaCha8Rng, max_images: usize, vocab: u32) -> TokenStream {
    let mut b = StreamBuilder::new();
    let lead = rng.random_range(1..8u64) as usize;
    for _ in 0..lead {
        b.push_text(rng.random_range(0..vocab as u64) as u32);
    }
    let n_images = rng.random_range(0..=max_images as u64) as usize;
    for _ in 0..n_images {
        let run = rng.random_range(1..32u64) as usize;
        let syms: Vec<u32> = (0..run)
            .map(|_| rng.random_range(0..vocab as u64) as u32)
            .collect();
        b.push_image(&syms);
        let gap = rng.random_range(0..6u64) as usize;
        for _ in 0..gap {
            b.push_text(rng.random_range(0..vocab as u64) as u32);
        }
    }
    b.finish(vocab).unwrap()
}

/// Largest relative disagreement between analytic gradients and central
/// finite differences, over every parameter of `model`.
///
/// The reference path is loss-only forward evaluation, independent of the
/// backward code it audits.
pub fn finite_difference_check(
    model: &mut TinyModel<f64>,
    stream: &TokenStream,
    positions: &crate::posindex::PositionSequence,
    answer_span: Span,
    step: f64,
) -> f64 {
    let item = || BatchItem {
        stream,
        positions,
        answer_span,
    };
    let (_, grads) = model.loss_and_grads(&[item()]).expect("grads");
    let analytic: Vec<(String, Vec<f64>)> = grads
        .blocks()
        .into_iter()
        .map(|(n, b)| (n, b.to_vec()))
        .collect();

    let mut worst: f64 = 0.0;
    for (bi, (_, block)) in analytic.iter().enumerate() {
        for i in 0..block.len() {
            let orig = {
                let mut blocks = model.blocks_mut();
                let p = &mut blocks[bi].1[i];
                let orig = *p;
                *p = orig + step;
                orig
            };
            let up = model.batch_loss(&[item()]).expect("loss");
            {
                let mut blocks = model.blocks_mut();
                blocks[bi].1[i] = orig - step;
            }
            let down = model.batch_loss(&[item()]).expect("loss");
            {
                let mut blocks = model.blocks_mut();
                blocks[bi].1[i] = orig;
            }
            let numeric = (up - down) / (2.0 * step);
            let a = block[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

type CheckResult = Result<(), String>;

fn check_degeneration(rng: &mut ChaCha8Rng) -> CheckResult {
    for _ in 0..200 {
        let s = random_stream(rng, 6, 64);
        let uniform = assign_deltas(&s, &DeltaPolicy::uniform()).map_err(|e| e.to_string())?;
        let fixed_one =
            assign_deltas(&s, &DeltaPolicy::fixed(Dyadic::ONE, DeltaTarget::VisualOnly))
                .map_err(|e| e.to_string())?;
        let p0 = derive_positions(&s, &uniform, DeltaTarget::Neither).map_err(|e| e.to_string())?;
        let p1 =
            derive_positions(&s, &fixed_one, DeltaTarget::VisualOnly).map_err(|e| e.to_string())?;
        if p0.values() != p1.values() {
            return Err("delta=1 positions differ from uniform baseline".into());
        }
        let counted: Vec<f64> = (0..s.len()).map(|i| i as f64).collect();
        if p0.values() != counted.as_slice() {
            return Err("uniform positions are not 0..N-1".into());
        }
    }
    Ok(())
}

fn check_closed_form(rng: &mut ChaCha8Rng) -> CheckResult {
    for _ in 0..200 {
        let s = random_stream(rng, 6, 64);
        let policy = DeltaPolicy::variable(rng.random(), DeltaTarget::VisualOnly);
        let a = assign_deltas(&s, &policy).map_err(|e| e.to_string())?;
        let p = derive_positions(&s, &a, policy.target).map_err(|e| e.to_string())?;
        let m = max_position(&s, &a, policy.target).map_err(|e| e.to_string())?;
        if p.last() != Some(m) {
            return Err(format!("closed form {m} != last position {:?}", p.last()));
        }
        for w in p.values().windows(2) {
            if w[1] <= w[0] {
                return Err("positions not strictly increasing".into());
            }
        }
    }
    Ok(())
}

fn check_rope_properties(rng: &mut ChaCha8Rng) -> CheckResult {
    let cfg = RopeConfig::standard(16, 1e4);
    let dot = |x: &[f64], y: &[f64]| -> f64 { x.iter().zip(y).map(|(a, b)| a * b).sum() };
    for _ in 0..500 {
        let q: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a: f64 = rng.random_range(0.0..2048.0);
        let b: f64 = rng.random_range(0.0..2048.0);
        let c: f64 = rng.random_range(-128.0..128.0);
        let lhs = dot(
            &apply_rope(&q, &cfg, a).unwrap(),
            &apply_rope(&k, &cfg, b).unwrap(),
        );
        let rhs = dot(
            &apply_rope(&q, &cfg, a + c).unwrap(),
            &apply_rope(&k, &cfg, b + c).unwrap(),
        );
        let scale = lhs.abs().max(rhs.abs()).max(1e-9);
        if (lhs - rhs).abs() / scale > 1e-4 {
            return Err(format!("shift invariance violated: {lhs} vs {rhs}"));
        }
    }
    let linear = cfg.with_scheme(EmbedScheme::LinearInterp { factor: 4.0 });
    for _ in 0..100 {
        let p: f64 = rng.random_range(0.0..4096.0);
        let a = rope_angles(&linear, p);
        let b = rope_angles(&cfg, p / 4.0);
        if a.iter()
            .zip(&b)
            .any(|(x, y)| (x - y).abs() > 1e-6 * (1.0 + y.abs()))
        {
            return Err("linear interpolation is not position rescaling".into());
        }
    }
    let ntk1 = cfg.with_scheme(EmbedScheme::NtkScaled { alpha: 1.0 });
    for p in [0.25, 7.5, 511.0] {
        if rope_angles(&ntk1, p) != rope_angles(&cfg, p) {
            return Err("NTK(alpha=1) differs from standard".into());
        }
    }
    Ok(())
}

fn check_adaptive_bound(rng: &mut ChaCha8Rng) -> CheckResult {
    for _ in 0..200 {
        let window = rng.random_range(64..1024u64);
        let s = feasible_stream(rng, window);
        let policy = DeltaPolicy::adaptive(window, DeltaTarget::VisualOnly);
        let a = assign_deltas(&s, &policy).map_err(|e| e.to_string())?;
        let m = max_position_exact(&s, &a, policy.target).map_err(|e| e.to_string())?;
        if m > Dyadic::from_int(window as i64) {
            return Err(format!("adaptive bound violated: {m} > {window}"));
        }
    }
    Ok(())
}

/// A stream whose textual contribution stays within the window and whose
/// visual load leaves room for the smallest default delta (the precondition
/// under which the adaptive bound is guaranteed).
pub fn feasible_stream(rng: &mut ChaCha8Rng, window: u64) -> TokenStream {
    let mut b = StreamBuilder::new();
    let text_budget = rng.random_range(1..=(window * 4 / 5).max(2)) as usize;
    let headroom = (window as usize - text_budget).max(1);
    let max_visual = headroom * 256;
    let visual_total = rng.random_range(0..=(max_visual.min(16_384)) as u64) as usize;
    let mut text_left = text_budget;
    let mut vis_left = visual_total;
    b.push_text(1);
    text_left -= 1;
    while text_left > 0 || vis_left > 0 {
        if vis_left > 0 {
            let run = rng.random_range(1..=vis_left.min(96) as u64) as usize;
            let syms = vec![2u32; run];
            b.push_image(&syms);
            vis_left -= run;
        }
        if text_left > 0 {
            let run = rng.random_range(1..=text_left.min(16) as u64) as usize;
            for _ in 0..run {
                b.push_text(3);
            }
            text_left -= run;
        }
    }
    b.finish(16).unwrap()
}

fn check_gradients() -> CheckResult {
    let config = TinyModelConfig {
        layers: 2,
        heads: 2,
        head_dim: 4,
        vocab_size: 16,
        max_trained_window: 64,
        rope: RopeConfig::standard(4, 1e4),
        seed: 3,
    };
    let mut model = TinyModel::<f64>::new(config).map_err(|e| e.to_string())?;
    let mut b = StreamBuilder::new();
    b.push_text_run(&[1, 2, 3]);
    b.push_image(&[4, 5, 6]);
    b.push_text_run(&[7, 8]);
    let stream = b.finish(16).unwrap();
    let policy = DeltaPolicy::fixed("1/4".parse().unwrap(), DeltaTarget::VisualOnly);
    let a = assign_deltas(&stream, &policy).map_err(|e| e.to_string())?;
    let positions = derive_positions(&stream, &a, policy.target).map_err(|e| e.to_string())?;
    let worst = finite_difference_check(&mut model, &stream, &positions, Span::new(6, 2), 1e-4);
    if worst > 1e-3 {
        return Err(format!("gradient mismatch: max relative error {worst:.2e}"));
    }
    Ok(())
}

fn check_scoring_oracle() -> CheckResult {
    struct Oracle;
    impl ScoringModel for Oracle {
        fn sequence_logits(
            &self,
            stream: &TokenStream,
            _positions: &crate::posindex::PositionSequence,
            _rope: Option<&RopeConfig>,
        ) -> Result<Array2<f32>, crate::tinyformer::ModelError> {
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
    let cfg = GenConfig {
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
    };
    for seed in 0..25 {
        let sample = gen_sample(&cfg, seed).map_err(|e| e.to_string())?;
        let a = assign_deltas(&sample.haystack, &DeltaPolicy::uniform())
            .map_err(|e| e.to_string())?;
        let p = derive_positions(&sample.haystack, &a, DeltaTarget::Neither)
            .map_err(|e| e.to_string())?;
        if !score_sample(&Oracle, &sample, &p).map_err(|e| e.to_string())? {
            return Err(format!("oracle model misscored sample {seed}"));
        }
    }
    Ok(())
}

/// Run every check; prints one line per check, returns overall success.
pub fn run_all() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let checks: Vec<(&str, CheckResult)> = vec![
        ("degeneration-to-uniform", check_degeneration(&mut rng)),
        ("closed-form-agreement", check_closed_form(&mut rng)),
        ("rope-relative-position", check_rope_properties(&mut rng)),
        ("adaptive-window-bound", check_adaptive_bound(&mut rng)),
        ("gradient-finite-difference", check_gradients()),
        ("scoring-protocol-oracle", check_scoring_oracle()),
    ];
    let mut ok = true;
    for (name, result) in checks {
        match result {
            Ok(()) => println!("PASS {name}"),
            Err(msg) => {
                ok = false;
                println!("FAIL {name}: {msg}");
            }
        }
    }
    ok
}
