//! Position-index derivation for interleaved multimodal sequences.
//!
//! The position of token 0 is 0; every later token advances the running
//! index by an increment that depends on its modality. The uniform baseline
//! increments by 1 everywhere. The variable scheme gives each image its own
//! fractional delta (constant within the image), which compresses the
//! positional footprint of visual content and keeps long sequences inside a
//! trained context window. Deltas are exact dyadic rationals, so the whole
//! recursion is exact; `f64` values fall out only at the end.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rational::Dyadic;
use crate::tokenstream::TokenStream;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("delta set is empty")]
    EmptyDeltaSet,
    #[error("delta {0} is outside (0, 1]")]
    DeltaOutOfRange(Dyadic),
    #[error("adaptive context window must be positive")]
    ZeroWindow,
    #[error("assignment is missing a delta for image {image_id}")]
    MissingImageDelta { image_id: u32 },
    #[error("position arithmetic overflowed")]
    Overflow,
}

/// The training-time candidate increment set {1, 1/2, …, 1/256}.
pub fn default_delta_set() -> Vec<Dyadic> {
    (0..=8).map(Dyadic::unit_fraction).collect()
}

/// Which modalities receive the policy's delta; the rest increment by 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaTarget {
    VisualOnly,
    TextualOnly,
    Both,
    Neither,
}

impl DeltaTarget {
    pub fn applies_to_visual(self) -> bool {
        matches!(self, DeltaTarget::VisualOnly | DeltaTarget::Both)
    }

    pub fn applies_to_textual(self) -> bool {
        matches!(self, DeltaTarget::TextualOnly | DeltaTarget::Both)
    }
}

/// How per-image deltas are chosen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum DeltaMode {
    /// Every increment is 1 (the standard index derivation).
    Uniform,
    /// One fixed delta for every image.
    Fixed { delta: Dyadic },
    /// Each image draws its delta independently and uniformly from the set,
    /// using a deterministic seeded generator.
    Variable {
        #[serde(default = "default_delta_set")]
        delta_set: Vec<Dyadic>,
        seed: u64,
    },
    /// The largest delta in the set whose closed-form max position stays
    /// within the context window, shared by all images. Falls back to the
    /// smallest member when none fits.
    Adaptive {
        window: u64,
        #[serde(default = "default_delta_set")]
        delta_set: Vec<Dyadic>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaPolicy {
    #[serde(flatten)]
    pub mode: DeltaMode,
    pub target: DeltaTarget,
}

impl DeltaPolicy {
    pub fn uniform() -> Self {
        DeltaPolicy {
            mode: DeltaMode::Uniform,
            target: DeltaTarget::Neither,
        }
    }

    pub fn fixed(delta: Dyadic, target: DeltaTarget) -> Self {
        DeltaPolicy {
            mode: DeltaMode::Fixed { delta },
            target,
        }
    }

    pub fn variable(seed: u64, target: DeltaTarget) -> Self {
        DeltaPolicy {
            mode: DeltaMode::Variable {
                delta_set: default_delta_set(),
                seed,
            },
            target,
        }
    }

    pub fn adaptive(window: u64, target: DeltaTarget) -> Self {
        DeltaPolicy {
            mode: DeltaMode::Adaptive {
                window,
                delta_set: default_delta_set(),
            },
            target,
        }
    }

    /// Same policy with a different seed; identity for non-variable modes.
    /// Training draws fresh deltas per sequence through this.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut p = self.clone();
        if let DeltaMode::Variable { seed: s, .. } = &mut p.mode {
            *s = seed;
        }
        p
    }

    fn validate(&self) -> Result<(), PolicyError> {
        let check_set = |set: &[Dyadic]| {
            if set.is_empty() {
                return Err(PolicyError::EmptyDeltaSet);
            }
            for &d in set {
                if !d.is_valid_increment() {
                    return Err(PolicyError::DeltaOutOfRange(d));
                }
            }
            Ok(())
        };
        match &self.mode {
            DeltaMode::Uniform => Ok(()),
            DeltaMode::Fixed { delta } => {
                if delta.is_valid_increment() {
                    Ok(())
                } else {
                    Err(PolicyError::DeltaOutOfRange(*delta))
                }
            }
            DeltaMode::Variable { delta_set, .. } => check_set(delta_set),
            DeltaMode::Adaptive { window, delta_set } => {
                if *window == 0 {
                    return Err(PolicyError::ZeroWindow);
                }
                check_set(delta_set)
            }
        }
    }
}

/// The per-image (and textual) increments a policy produced for one stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeltaAssignment {
    /// Indexed by image id; image ids are dense by stream invariant.
    per_image: Vec<Dyadic>,
    textual_delta: Dyadic,
}

impl DeltaAssignment {
    pub fn new(per_image: Vec<Dyadic>, textual_delta: Dyadic) -> Self {
        DeltaAssignment {
            per_image,
            textual_delta,
        }
    }

    pub fn image_delta(&self, image_id: u32) -> Option<Dyadic> {
        self.per_image.get(image_id as usize).copied()
    }

    pub fn image_deltas(&self) -> &[Dyadic] {
        &self.per_image
    }

    pub fn textual_delta(&self) -> Dyadic {
        self.textual_delta
    }
}

/// Wire form: `{"images": {"0": "1/8", ...}, "text": "1"}`.
#[derive(Serialize, Deserialize)]
struct AssignmentWire {
    images: BTreeMap<String, Dyadic>,
    text: Dyadic,
}

impl Serialize for DeltaAssignment {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let images = self
            .per_image
            .iter()
            .enumerate()
            .map(|(i, d)| (i.to_string(), *d))
            .collect();
        AssignmentWire {
            images,
            text: self.textual_delta,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DeltaAssignment {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = AssignmentWire::deserialize(deserializer)?;
        let mut per_image = vec![Dyadic::ONE; wire.images.len()];
        for (key, delta) in &wire.images {
            let id: usize = key
                .parse()
                .map_err(|_| serde::de::Error::custom(format!("bad image id `{key}`")))?;
            if id >= per_image.len() {
                return Err(serde::de::Error::custom(format!(
                    "image ids must be dense, got {id} of {}",
                    per_image.len()
                )));
            }
            per_image[id] = *delta;
        }
        Ok(DeltaAssignment {
            per_image,
            textual_delta: wire.text,
        })
    }
}

/// Real-valued position indices, one per token. `values[0] == 0` and the
/// sequence strictly increases whenever every increment is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionSequence {
    values: Vec<f64>,
}

impl PositionSequence {
    /// Wrap raw position values (shift experiments, tests).
    pub fn from_values(values: Vec<f64>) -> Self {
        PositionSequence { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn last(&self) -> Option<f64> {
        self.values.last().copied()
    }
}

impl std::ops::Index<usize> for PositionSequence {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

/// Choose a delta for every image of `stream` according to `policy`.
///
/// Variable mode draws once per image in image-id order; adaptive mode picks
/// the largest set member whose closed-form max position stays within the
/// window (smallest member if none does). When the target includes textual
/// tokens, fixed/variable modes also set the textual delta (one extra draw
/// for variable); adaptive scales image deltas only and leaves text at 1.
pub fn assign_deltas(
    stream: &TokenStream,
    policy: &DeltaPolicy,
) -> Result<DeltaAssignment, PolicyError> {
    policy.validate()?;
    let n_images = stream.n_images() as usize;
    match &policy.mode {
        DeltaMode::Uniform => Ok(DeltaAssignment::new(vec![Dyadic::ONE; n_images], Dyadic::ONE)),
        DeltaMode::Fixed { delta } => {
            let textual = if policy.target.applies_to_textual() {
                *delta
            } else {
                Dyadic::ONE
            };
            Ok(DeltaAssignment::new(vec![*delta; n_images], textual))
        }
        DeltaMode::Variable { delta_set, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut draw = || delta_set[rng.random_range(0..delta_set.len() as u64) as usize];
            let per_image = (0..n_images).map(|_| draw()).collect();
            let textual = if policy.target.applies_to_textual() {
                draw()
            } else {
                Dyadic::ONE
            };
            Ok(DeltaAssignment::new(per_image, textual))
        }
        DeltaMode::Adaptive { window, delta_set } => {
            let mut sorted = delta_set.clone();
            sorted.sort();
            sorted.dedup();
            let bound = Dyadic::from_int(*window as i64);
            let mut chosen = sorted[0]; // smallest member fallback
            for &cand in sorted.iter().rev() {
                let trial = DeltaAssignment::new(vec![cand; n_images], Dyadic::ONE);
                if max_position_exact(stream, &trial, policy.target)? <= bound {
                    chosen = cand;
                    break;
                }
            }
            Ok(DeltaAssignment::new(vec![chosen; n_images], Dyadic::ONE))
        }
    }
}

/// Increment contributed by one token under an assignment and target.
fn increment(
    token: &crate::tokenstream::Token,
    assignment: &DeltaAssignment,
    target: DeltaTarget,
) -> Result<Dyadic, PolicyError> {
    match token.image_id {
        Some(id) => {
            if target.applies_to_visual() {
                assignment
                    .image_delta(id)
                    .ok_or(PolicyError::MissingImageDelta { image_id: id })
            } else {
                Ok(Dyadic::ONE)
            }
        }
        None => Ok(if target.applies_to_textual() {
            assignment.textual_delta()
        } else {
            Dyadic::ONE
        }),
    }
}

/// Run the recursion: `p[0] = 0`, `p[i] = p[i-1] + inc(x[i])`.
pub fn derive_positions(
    stream: &TokenStream,
    assignment: &DeltaAssignment,
    target: DeltaTarget,
) -> Result<PositionSequence, PolicyError> {
    let mut values = Vec::with_capacity(stream.len());
    let mut acc = Dyadic::ZERO;
    for (i, tok) in stream.tokens().iter().enumerate() {
        if i > 0 {
            let inc = increment(tok, assignment, target)?;
            acc = acc.checked_add(inc).map_err(|_| PolicyError::Overflow)?;
        }
        values.push(acc.to_f64());
    }
    Ok(PositionSequence { values })
}

/// Closed form of the recursion endpoint, exact in dyadic arithmetic.
///
/// Token 0 contributes no increment, so its increment is subtracted from the
/// per-run totals.
pub fn max_position_exact(
    stream: &TokenStream,
    assignment: &DeltaAssignment,
    target: DeltaTarget,
) -> Result<Dyadic, PolicyError> {
    if stream.is_empty() {
        return Ok(Dyadic::ZERO);
    }
    let (n_textual, _) = stream.count_by_modality();
    let textual_inc = if target.applies_to_textual() {
        assignment.textual_delta()
    } else {
        Dyadic::ONE
    };
    let mut total = textual_inc
        .checked_mul_int(n_textual as u64)
        .map_err(|_| PolicyError::Overflow)?;
    for run in stream.image_runs() {
        let delta = if target.applies_to_visual() {
            assignment
                .image_delta(run.image_id)
                .ok_or(PolicyError::MissingImageDelta {
                    image_id: run.image_id,
                })?
        } else {
            Dyadic::ONE
        };
        let run_total = delta
            .checked_mul_int(run.len as u64)
            .map_err(|_| PolicyError::Overflow)?;
        total = total
            .checked_add(run_total)
            .map_err(|_| PolicyError::Overflow)?;
    }
    // Remove the increment the first token never applies.
    let first_inc = increment(&stream.tokens()[0], assignment, target)?;
    total = total
        .checked_add(Dyadic::new(-first_inc.numerator(), first_inc.log2_denominator()))
        .map_err(|_| PolicyError::Overflow)?;
    Ok(total)
}

/// Closed-form maximum position as `f64`; equals the last derived position.
pub fn max_position(
    stream: &TokenStream,
    assignment: &DeltaAssignment,
    target: DeltaTarget,
) -> Result<f64, PolicyError> {
    Ok(max_position_exact(stream, assignment, target)?.to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenstream::{StreamBuilder, Token};

    fn delta(s: &str) -> Dyadic {
        s.parse().unwrap()
    }

    /// 3 text + 4-token image + 2 text.
    fn mixed_stream() -> TokenStream {
        let mut b = StreamBuilder::new();
        b.push_text_run(&[1, 2, 3]);
        b.push_image(&[4, 5, 6, 7]);
        b.push_text_run(&[8, 9]);
        b.finish(64).unwrap()
    }

    #[test]
    fn fixed_policy_assigns_constant() {
        let policy = DeltaPolicy::fixed(delta("1/4"), DeltaTarget::VisualOnly);
        let a = assign_deltas(&mixed_stream(), &policy).unwrap();
        assert_eq!(a.image_deltas(), &[delta("1/4")]);
        assert_eq!(a.textual_delta(), Dyadic::ONE);
    }

    #[test]
    fn uniform_policy_is_all_ones() {
        let a = assign_deltas(&mixed_stream(), &DeltaPolicy::uniform()).unwrap();
        assert_eq!(a.image_deltas(), &[Dyadic::ONE]);
    }

    #[test]
    fn variable_policy_is_deterministic() {
        let mut b = StreamBuilder::new();
        for _ in 0..16 {
            b.push_image(&[1, 2, 3]);
            b.push_text(4);
        }
        let s = b.finish(64).unwrap();
        let policy = DeltaPolicy::variable(1234, DeltaTarget::VisualOnly);
        let a1 = assign_deltas(&s, &policy).unwrap();
        let a2 = assign_deltas(&s, &policy).unwrap();
        assert_eq!(a1, a2);
        // Different seeds should (for this stream) differ somewhere.
        let a3 = assign_deltas(&s, &policy.reseeded(99)).unwrap();
        assert_ne!(a1.image_deltas(), a3.image_deltas());
        // All draws come from the default set.
        let set = default_delta_set();
        assert!(a1.image_deltas().iter().all(|d| set.contains(d)));
    }

    #[test]
    fn adaptive_picks_largest_feasible() {
        // 100 textual tokens then 10 images x 256 visual tokens.
        // 99 + 2560*(1/8) = 419 <= 512 but 99 + 2560*(1/4) = 739 > 512.
        let mut b = StreamBuilder::new();
        b.push_text_run(&vec![1; 100]);
        for _ in 0..10 {
            b.push_image(&vec![2; 256]);
        }
        let s = b.finish(64).unwrap();
        let policy = DeltaPolicy::adaptive(512, DeltaTarget::VisualOnly);
        let a = assign_deltas(&s, &policy).unwrap();
        assert_eq!(a.image_deltas(), &vec![delta("1/8"); 10]);
        let m = max_position_exact(&s, &a, DeltaTarget::VisualOnly).unwrap();
        assert_eq!(m, Dyadic::from_int(419));
    }

    #[test]
    fn adaptive_falls_back_to_smallest() {
        // Overwhelming visual load: even 1/256 exceeds the window.
        let mut b = StreamBuilder::new();
        b.push_text(1);
        b.push_image(&vec![2; 4096]);
        let s = b.finish(64).unwrap();
        let policy = DeltaPolicy::adaptive(4, DeltaTarget::VisualOnly);
        let a = assign_deltas(&s, &policy).unwrap();
        assert_eq!(a.image_deltas(), &vec![delta("1/256"); 1]);
    }

    #[test]
    fn empty_delta_set_is_an_error() {
        let policy = DeltaPolicy {
            mode: DeltaMode::Variable {
                delta_set: vec![],
                seed: 0,
            },
            target: DeltaTarget::VisualOnly,
        };
        assert_eq!(
            assign_deltas(&mixed_stream(), &policy),
            Err(PolicyError::EmptyDeltaSet)
        );
    }

    #[test]
    fn out_of_range_delta_is_an_error() {
        let policy = DeltaPolicy::fixed(Dyadic::from_int(2), DeltaTarget::VisualOnly);
        assert!(matches!(
            assign_deltas(&mixed_stream(), &policy),
            Err(PolicyError::DeltaOutOfRange(_))
        ));
    }

    #[test]
    fn neither_target_degenerates_to_uniform() {
        let s = mixed_stream();
        let a = assign_deltas(&s, &DeltaPolicy::fixed(delta("1/4"), DeltaTarget::Neither)).unwrap();
        let p = derive_positions(&s, &a, DeltaTarget::Neither).unwrap();
        let expect: Vec<f64> = (0..s.len()).map(|i| i as f64).collect();
        assert_eq!(p.values(), expect.as_slice());
    }

    #[test]
    fn hand_recursion_visual_only() {
        // [T,T,T,V0 x4,T,T] with d0=1/4:
        // [0, 1, 2, 2.25, 2.5, 2.75, 3.0, 4.0, 5.0]
        let mut b = StreamBuilder::new();
        b.push_text_run(&[1, 2, 3]);
        b.push_image(&[4, 5, 6, 7]);
        b.push_text_run(&[8, 9]);
        let s = b.finish(64).unwrap();
        let a = DeltaAssignment::new(vec![delta("1/4")], Dyadic::ONE);
        let p = derive_positions(&s, &a, DeltaTarget::VisualOnly).unwrap();
        assert_eq!(
            p.values(),
            &[0.0, 1.0, 2.0, 2.25, 2.5, 2.75, 3.0, 4.0, 5.0]
        );
        // Closed form agrees exactly.
        assert_eq!(
            max_position_exact(&s, &a, DeltaTarget::VisualOnly).unwrap(),
            Dyadic::from_int(5)
        );
        assert_eq!(max_position(&s, &a, DeltaTarget::VisualOnly).unwrap(), 5.0);
    }

    #[test]
    fn first_token_visual_still_starts_at_zero() {
        // [V0 x4, T] with d0=1/2 -> [0, 0.5, 1.0, 1.5, 2.5]
        let mut b = StreamBuilder::new();
        b.push_image(&[1, 2, 3, 4]);
        b.push_text(5);
        let s = b.finish(64).unwrap();
        let a = DeltaAssignment::new(vec![delta("1/2")], Dyadic::ONE);
        let p = derive_positions(&s, &a, DeltaTarget::VisualOnly).unwrap();
        assert_eq!(p.values(), &[0.0, 0.5, 1.0, 1.5, 2.5]);
        assert_eq!(
            max_position_exact(&s, &a, DeltaTarget::VisualOnly).unwrap(),
            delta("5/2")
        );
    }

    #[test]
    fn all_textual_max_position_is_n_minus_1() {
        let mut b = StreamBuilder::new();
        b.push_text_run(&vec![1; 37]);
        let s = b.finish(64).unwrap();
        let a = assign_deltas(&s, &DeltaPolicy::uniform()).unwrap();
        assert_eq!(
            max_position_exact(&s, &a, DeltaTarget::Neither).unwrap(),
            Dyadic::from_int(36)
        );
    }

    #[test]
    fn textual_targeting_scales_text() {
        let mut b = StreamBuilder::new();
        b.push_text_run(&[1, 2, 3]);
        b.push_image(&[4, 5]);
        let s = b.finish(64).unwrap();
        let a = DeltaAssignment::new(vec![delta("1/4")], delta("1/2"));
        let p = derive_positions(&s, &a, DeltaTarget::TextualOnly).unwrap();
        // Text moves by 1/2, visual by 1.
        assert_eq!(p.values(), &[0.0, 0.5, 1.0, 2.0, 3.0]);
        let p = derive_positions(&s, &a, DeltaTarget::Both).unwrap();
        assert_eq!(p.values(), &[0.0, 0.5, 1.0, 1.25, 1.5]);
    }

    #[test]
    fn missing_image_delta_is_an_error() {
        let s = mixed_stream();
        let a = DeltaAssignment::new(vec![], Dyadic::ONE);
        assert_eq!(
            derive_positions(&s, &a, DeltaTarget::VisualOnly),
            Err(PolicyError::MissingImageDelta { image_id: 0 })
        );
        assert_eq!(
            max_position_exact(&s, &a, DeltaTarget::VisualOnly),
            Err(PolicyError::MissingImageDelta { image_id: 0 })
        );
    }

    #[test]
    fn empty_stream_yields_empty_positions() {
        let s = TokenStream::new(vec![], 4).unwrap();
        let a = assign_deltas(&s, &DeltaPolicy::uniform()).unwrap();
        let p = derive_positions(&s, &a, DeltaTarget::Neither).unwrap();
        assert!(p.is_empty());
        assert!(max_position_exact(&s, &a, DeltaTarget::Neither)
            .unwrap()
            .is_zero());
    }

    #[test]
    fn positions_ignore_symbol_ids() {
        let mk = |syms: &[u32]| {
            let mut b = StreamBuilder::new();
            b.push_text(syms[0]);
            b.push_image(&syms[1..4]);
            b.push_text(syms[4]);
            b.finish(64).unwrap()
        };
        let s1 = mk(&[1, 2, 3, 4, 5]);
        let s2 = mk(&[9, 8, 7, 6, 5]);
        let policy = DeltaPolicy::fixed(delta("1/8"), DeltaTarget::VisualOnly);
        let a1 = assign_deltas(&s1, &policy).unwrap();
        let a2 = assign_deltas(&s2, &policy).unwrap();
        let p1 = derive_positions(&s1, &a1, policy.target).unwrap();
        let p2 = derive_positions(&s2, &a2, policy.target).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn assignment_json_round_trip() {
        let a = DeltaAssignment::new(vec![delta("1/8"), Dyadic::ONE], Dyadic::ONE);
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(json, r#"{"images":{"0":"1/8","1":"1"},"text":"1"}"#);
        let back: DeltaAssignment = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn policy_serde_round_trip() {
        let policies = [
            DeltaPolicy::uniform(),
            DeltaPolicy::fixed(delta("1/16"), DeltaTarget::VisualOnly),
            DeltaPolicy::variable(7, DeltaTarget::Both),
            DeltaPolicy::adaptive(512, DeltaTarget::VisualOnly),
        ];
        for p in &policies {
            let json = serde_json::to_string(p).unwrap();
            let back: DeltaPolicy = serde_json::from_str(&json).unwrap();
            assert_eq!(&back, p);
        }
    }

    #[test]
    fn single_token_stream_positions() {
        let s = TokenStream::new(vec![Token::visual(0, 1)], 4).unwrap();
        let a = DeltaAssignment::new(vec![delta("1/2")], Dyadic::ONE);
        let p = derive_positions(&s, &a, DeltaTarget::VisualOnly).unwrap();
        assert_eq!(p.values(), &[0.0]);
        assert!(max_position_exact(&s, &a, DeltaTarget::VisualOnly)
            .unwrap()
            .is_zero());
    }
}
