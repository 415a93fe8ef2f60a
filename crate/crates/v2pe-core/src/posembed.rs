//! Rotary position embeddings at real-valued positions.
//!
//! Angles follow the standard rotary construction, `angle_j = p * base^(-2j/d)`
//! for the adjacent coordinate pair `(2j, 2j+1)`. Positions may be fractional;
//! the relative-position property of the rotation (attention scores depend
//! only on position differences) holds for arbitrary real offsets, which is
//! what makes fractional increments meaningful. Two long-context extension
//! baselines are provided: linear position interpolation (rescale the
//! position by a factor) and NTK-aware base scaling (enlarge the rotary
//! base by `alpha^(d/(d-2))`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Scaling factor the NTK baseline defaults to.
pub const DEFAULT_NTK_ALPHA: f64 = 5.0;
/// Conventional rotary base.
pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EmbedError {
    #[error("head dimension must be a positive even number, got {0}")]
    OddHeadDim(usize),
    #[error("rotary base must be positive")]
    NonPositiveBase,
    #[error("scaling parameter must be >= 1")]
    ScaleBelowOne,
    #[error("vector length {got} does not match head dimension {expected}")]
    DimensionMismatch { got: usize, expected: usize },
}

/// How positions map into the rotary embedding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EmbedScheme {
    /// Plain rotary embedding.
    Standard,
    /// Positions are divided by `factor` before embedding, mapping a longer
    /// sequence back into the trained range.
    LinearInterp { factor: f64 },
    /// The rotary base is scaled to `base * alpha^(d/(d-2))`.
    NtkScaled { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
    pub scheme: EmbedScheme,
}

impl RopeConfig {
    pub fn standard(head_dim: usize, base: f64) -> Self {
        RopeConfig {
            head_dim,
            base,
            scheme: EmbedScheme::Standard,
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(EmbedError::OddHeadDim(self.head_dim));
        }
        if !(self.base > 0.0) {
            return Err(EmbedError::NonPositiveBase);
        }
        match self.scheme {
            EmbedScheme::Standard => Ok(()),
            EmbedScheme::LinearInterp { factor } if factor >= 1.0 => Ok(()),
            EmbedScheme::NtkScaled { alpha } if alpha >= 1.0 => Ok(()),
            _ => Err(EmbedError::ScaleBelowOne),
        }
    }

    /// Effective `(position, base)` after the scheme's adjustment.
    pub fn effective(&self, p: f64) -> (f64, f64) {
        match self.scheme {
            EmbedScheme::Standard => (p, self.base),
            EmbedScheme::LinearInterp { factor } => (p / factor, self.base),
            EmbedScheme::NtkScaled { alpha } => {
                let d = self.head_dim as f64;
                (p, self.base * alpha.powf(d / (d - 2.0)))
            }
        }
    }

    /// Same config with a different scheme (used by evaluation sweeps).
    pub fn with_scheme(&self, scheme: EmbedScheme) -> Self {
        RopeConfig { scheme, ..*self }
    }
}

/// The `d/2` rotation angles at position `p`.
pub fn rope_angles(cfg: &RopeConfig, p: f64) -> Vec<f64> {
    let (p_eff, base) = cfg.effective(p);
    let d = cfg.head_dim as f64;
    (0..cfg.head_dim / 2)
        .map(|j| p_eff * base.powf(-2.0 * j as f64 / d))
        .collect()
}

/// Rotate each adjacent coordinate pair of `h` by its angle at position `p`.
pub fn apply_rope(h: &[f64], cfg: &RopeConfig, p: f64) -> Result<Vec<f64>, EmbedError> {
    if h.len() != cfg.head_dim {
        return Err(EmbedError::DimensionMismatch {
            got: h.len(),
            expected: cfg.head_dim,
        });
    }
    let angles = rope_angles(cfg, p);
    let mut out = Vec::with_capacity(h.len());
    for (j, &theta) in angles.iter().enumerate() {
        let (sin, cos) = theta.sin_cos();
        let x0 = h[2 * j];
        let x1 = h[2 * j + 1];
        out.push(x0 * cos - x1 * sin);
        out.push(x0 * sin + x1 * cos);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(head_dim: usize, scheme: EmbedScheme) -> RopeConfig {
        let c = RopeConfig {
            head_dim,
            base: DEFAULT_ROPE_BASE,
            scheme,
        };
        c.validate().unwrap();
        c
    }

    #[test]
    fn zero_position_means_zero_angles() {
        for scheme in [
            EmbedScheme::Standard,
            EmbedScheme::LinearInterp { factor: 2.0 },
            EmbedScheme::NtkScaled { alpha: 5.0 },
        ] {
            let angles = rope_angles(&cfg(8, scheme), 0.0);
            assert!(angles.iter().all(|&a| a == 0.0));
        }
    }

    #[test]
    fn standard_angles_hand_check() {
        // d=4, base=10000, p=1: [10000^0, 10000^(-1/2)] = [1.0, 0.01]
        let angles = rope_angles(&cfg(4, EmbedScheme::Standard), 1.0);
        assert_eq!(angles.len(), 2);
        assert_relative_eq!(angles[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(angles[1], 0.01, max_relative = 1e-12);
    }

    #[test]
    fn linear_interp_is_position_rescaling() {
        let standard = cfg(16, EmbedScheme::Standard);
        let interp = cfg(16, EmbedScheme::LinearInterp { factor: 2.0 });
        let a = rope_angles(&interp, 64.0);
        let b = rope_angles(&standard, 32.0);
        assert_eq!(a, b);
    }

    #[test]
    fn ntk_alpha_one_is_standard() {
        let standard = cfg(16, EmbedScheme::Standard);
        let ntk = cfg(16, EmbedScheme::NtkScaled { alpha: 1.0 });
        for p in [0.5, 3.25, 1000.0] {
            assert_eq!(rope_angles(&ntk, p), rope_angles(&standard, p));
        }
    }

    #[test]
    fn ntk_scales_the_base() {
        let c = cfg(8, EmbedScheme::NtkScaled { alpha: 5.0 });
        let (_, base) = c.effective(1.0);
        assert_relative_eq!(
            base,
            DEFAULT_ROPE_BASE * 5f64.powf(8.0 / 6.0),
            max_relative = 1e-12
        );
    }

    #[test]
    fn apply_rope_identity_at_zero() {
        let c = cfg(8, EmbedScheme::Standard);
        let h: Vec<f64> = (0..8).map(|i| i as f64 - 3.0).collect();
        assert_eq!(apply_rope(&h, &c, 0.0).unwrap(), h);
    }

    #[test]
    fn apply_rope_two_dim_rotation() {
        // d=2, h=(1,0), angle theta -> (cos theta, sin theta)
        let c = RopeConfig {
            head_dim: 2,
            base: 7.0,
            scheme: EmbedScheme::Standard,
        };
        let p = 0.7;
        let theta = rope_angles(&c, p)[0];
        let out = apply_rope(&[1.0, 0.0], &c, p).unwrap();
        assert_relative_eq!(out[0], theta.cos(), max_relative = 1e-12);
        assert_relative_eq!(out[1], theta.sin(), max_relative = 1e-12);
    }

    #[test]
    fn rotation_preserves_norm() {
        let c = cfg(16, EmbedScheme::Standard);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let h: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p: f64 = rng.random_range(0.0..1e4);
            let out = apply_rope(&h, &c, p).unwrap();
            let n0: f64 = h.iter().map(|x| x * x).sum::<f64>().sqrt();
            let n1: f64 = out.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert_relative_eq!(n0, n1, max_relative = 1e-5);
        }
    }

    #[test]
    fn inverse_rotation_recovers_input() {
        let c = cfg(8, EmbedScheme::Standard);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let h: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p: f64 = rng.random_range(-100.0..100.0);
            let fwd = apply_rope(&h, &c, p).unwrap();
            let back = apply_rope(&fwd, &c, -p).unwrap();
            for (a, b) in h.iter().zip(&back) {
                assert_relative_eq!(a, b, max_relative = 1e-5, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn relative_position_property_fractional() {
        // <R(a)q, R(b)k> == <R(a+c)q, R(b+c)k> for real a, b, c.
        let c = cfg(16, EmbedScheme::Standard);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let q: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a: f64 = rng.random_range(0.0..512.0);
            let b: f64 = rng.random_range(0.0..512.0);
            let shift: f64 = rng.random_range(-64.0..64.0);
            let dot = |x: &[f64], y: &[f64]| -> f64 { x.iter().zip(y).map(|(u, v)| u * v).sum() };
            let lhs = dot(
                &apply_rope(&q, &c, a).unwrap(),
                &apply_rope(&k, &c, b).unwrap(),
            );
            let rhs = dot(
                &apply_rope(&q, &c, a + shift).unwrap(),
                &apply_rope(&k, &c, b + shift).unwrap(),
            );
            assert_relative_eq!(lhs, rhs, max_relative = 1e-4, epsilon = 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let c = cfg(8, EmbedScheme::Standard);
        assert_eq!(
            apply_rope(&[1.0; 6], &c, 1.0),
            Err(EmbedError::DimensionMismatch {
                got: 6,
                expected: 8
            })
        );
    }

    #[test]
    fn config_validation() {
        assert!(RopeConfig::standard(7, 1e4).validate().is_err());
        assert!(RopeConfig::standard(0, 1e4).validate().is_err());
        assert!(RopeConfig::standard(8, -1.0).validate().is_err());
        assert!(RopeConfig {
            head_dim: 8,
            base: 1e4,
            scheme: EmbedScheme::LinearInterp { factor: 0.5 }
        }
        .validate()
        .is_err());
        assert!(RopeConfig {
            head_dim: 8,
            base: 1e4,
            scheme: EmbedScheme::NtkScaled { alpha: 0.9 }
        }
        .validate()
        .is_err());
    }
}
