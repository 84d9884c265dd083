//! Action-level target corruption: truncated Cauchy and sparse impulses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};

pub const DEFAULT_CAUCHY_GAMMA: f64 = 0.02;
/// Heavier Cauchy scale used by the noise bench so the robustness gap is
/// visible with a few hundred error samples.
pub const BENCH_CAUCHY_GAMMA: f64 = 0.1;
pub const DEFAULT_IMPULSE_P: f64 = 0.05;
pub const DEFAULT_IMPULSE_STD: f64 = 1.0;
pub const DEFAULT_TRUNCATION_BOUND: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum NoiseKind {
    Cauchy,
    Impulse,
    #[default]
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub gamma: f64,
    pub p: f64,
    pub impulse_std: f64,
    pub truncation_bound: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::None,
            gamma: DEFAULT_CAUCHY_GAMMA,
            p: DEFAULT_IMPULSE_P,
            impulse_std: DEFAULT_IMPULSE_STD,
            truncation_bound: DEFAULT_TRUNCATION_BOUND,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn cauchy(gamma: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Cauchy,
            gamma,
            seed,
            ..Self::default()
        }
    }

    pub fn impulse(p: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Impulse,
            p,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_positive("truncation_bound", self.truncation_bound)?;
        match self.kind {
            NoiseKind::Cauchy => ensure_positive("gamma", self.gamma),
            NoiseKind::Impulse => {
                if !(0.0..=1.0).contains(&self.p) {
                    return Err(Error::config(format!("impulse p must be in [0, 1], got {}", self.p)));
                }
                if !(self.impulse_std.is_finite() && self.impulse_std >= 0.0) {
                    return Err(Error::config(format!(
                        "impulse_std must be finite and nonnegative, got {}",
                        self.impulse_std
                    )));
                }
                Ok(())
            }
            NoiseKind::None => Ok(()),
        }
    }
}

/// Corrupts a flat action buffer with a fresh stream seeded from `spec.seed`.
pub fn corrupt_actions(actions: &[f64], spec: &NoiseSpec) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    corrupt_actions_with(actions, spec, &mut rng)
}

/// Cauchy noise is drawn by inverse CDF, `γ tan(π(u − ½))`, and clipped to
/// `±truncation_bound`. Impulses use an independent Bernoulli(p) mask per
/// element with N(0, impulse_std²) deviations.
pub fn corrupt_actions_with<R: Rng + ?Sized>(actions: &[f64], spec: &NoiseSpec, rng: &mut R) -> Result<Vec<f64>> {
    spec.validate()?;
    if let Some(i) = actions.iter().position(|a| !a.is_finite()) {
        return Err(Error::input(format!("action element {i} is not finite")));
    }
    let bound = spec.truncation_bound;
    Ok(match spec.kind {
        NoiseKind::None => actions.to_vec(),
        NoiseKind::Cauchy => actions
            .iter()
            .map(|a| {
                let u: f64 = rng.random();
                let eps = spec.gamma * (std::f64::consts::PI * (u - 0.5)).tan();
                a + eps.clamp(-bound, bound)
            })
            .collect(),
        NoiseKind::Impulse => {
            let mask = Bernoulli::new(spec.p).map_err(|e| Error::config(e.to_string()))?;
            let dev = Normal::new(0.0, spec.impulse_std).map_err(|e| Error::config(e.to_string()))?;
            actions
                .iter()
                .map(|a| if mask.sample(rng) { a + dev.sample(rng) } else { *a })
                .collect()
        }
    })
}
