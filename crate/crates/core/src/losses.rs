//! The trajectory-level MEE loss family and the combined training objective.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::kernel::{information_potential_with, ErrorSet, Geometry, Reduction};

pub const DEFAULT_SIGMA: f64 = 0.5;
pub const DEFAULT_SIGMA_W: f64 = 0.5;
pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_WARMUP_FRACTION: f64 = 1.0 / 3.0;
/// Documented working range for the kernel bandwidth.
pub const SIGMA_RANGE: (f64, f64) = (0.5, 2.0);
/// Loss weights used in the hyperparameter menu.
pub const ALPHA_MENU: [f64; 3] = [0.01, 0.1, 1.0];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    #[serde(rename = "TMEE")]
    Tmee,
    /// Chunk-weighted: `ω_ij = w_i / N²`.
    #[serde(rename = "CW_TMEE")]
    CwTmee,
    /// Element-weighted: `ω_ij = w_i · w_j`.
    #[serde(rename = "EW_TMEE")]
    EwTmee,
}

impl Variant {
    pub fn is_weighted(self) -> bool {
        !matches!(self, Variant::Tmee)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub sigma: f64,
    pub sigma_w: f64,
    pub alpha: f64,
    pub variant: Variant,
    pub warmup_fraction: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            sigma_w: DEFAULT_SIGMA_W,
            alpha: DEFAULT_ALPHA,
            variant: Variant::Tmee,
            warmup_fraction: DEFAULT_WARMUP_FRACTION,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_positive("sigma", self.sigma)?;
        ensure_positive("sigma_w", self.sigma_w)?;
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        Ok(())
    }

    /// First step at which the entropy term is active: `⌈warmup_fraction · total_steps⌉`.
    ///
    /// Products within 1e-9 of an integer are snapped to it, so `1/3 · 30000`
    /// activates at 10000 rather than 10001.
    pub fn activation_step(&self, total_steps: usize) -> usize {
        let raw = self.warmup_fraction * total_steps as f64;
        let nearest = raw.round();
        if (raw - nearest).abs() <= 1e-9 * nearest.max(1.0) {
            nearest as usize
        } else {
            raw.ceil() as usize
        }
    }

    pub fn entropy_active(&self, step: usize, total_steps: usize) -> bool {
        step >= self.activation_step(total_steps)
    }
}

/// Normalized non-negative importance weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for WeightVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// `(1/N) Σ_i ‖e_i‖²`.
pub fn mse_loss(errors: &ErrorSet) -> f64 {
    errors.as_flat().iter().map(|x| x * x).sum::<f64>() / errors.len() as f64
}

/// `−log(Z / N²)`; zero exactly when every sample coincides.
pub fn tmee_loss(errors: &ErrorSet, sigma: f64) -> Result<f64> {
    tmee_loss_with(errors, sigma, Reduction::Deterministic)
}

pub fn tmee_loss_with(errors: &ErrorSet, sigma: f64, mode: Reduction) -> Result<f64> {
    let z = information_potential_with(errors, sigma, mode)?;
    Ok(tmee_from_potential(z, errors.len()))
}

pub(crate) fn tmee_from_potential(z: f64, n: usize) -> f64 {
    let n = n as f64;
    // Z ≤ N² always; clamp away a rounding overshoot so the loss stays ≥ 0.
    (-(z / (n * n)).ln()).max(0.0)
}

/// Softmax of `−‖e_i‖² / 2σ_w²`, max-shifted so huge magnitudes stay finite.
pub fn chunk_weights(errors: &ErrorSet, sigma_w: f64) -> Result<WeightVector> {
    ensure_positive("sigma_w", sigma_w)?;
    let scale = 1.0 / (2.0 * sigma_w * sigma_w);
    let logits: Vec<f64> = errors
        .samples()
        .map(|s| -s.iter().map(|x| x * x).sum::<f64>() * scale)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    Ok(WeightVector(w))
}

/// Intermediate sums of a weighted estimator, reused by the gradient code.
pub(crate) struct WeightedParts {
    pub weights: Vec<f64>,
    /// `S = Σ_ij ω_ij k_ij`.
    pub s: f64,
    /// Per-sample kernel sums: `Σ_j w_j k_ij` for Ew, `Σ_j k_ij` for Cw.
    pub row: Vec<f64>,
    /// Row-major `N × D` pull terms, present when requested: `Σ_j w_j k_ij (e_i − e_j)`
    /// for Ew and `Σ_j (w_i + w_j) k_ij (e_i − e_j)` for Cw.
    pub pull: Option<Vec<f64>>,
}

pub(crate) fn weighted_parts(errors: &ErrorSet, config: &LossConfig, with_pull: bool) -> Result<WeightedParts> {
    if !config.variant.is_weighted() {
        return Err(Error::config(
            "weighted_tmee_loss needs CW_TMEE or EW_TMEE; use tmee_loss for TMEE",
        ));
    }
    let weights = chunk_weights(errors, config.sigma_w)?.into_inner();
    let geo = Geometry::new(errors, config.sigma)?;
    let n = errors.len();
    let dim = errors.dim();
    let ew = config.variant == Variant::EwTmee;
    let mut row = vec![0.0; n];
    let mut pull = with_pull.then(|| vec![0.0; n * dim]);
    for i in 0..n {
        row[i] += if ew { weights[i] } else { 1.0 };
        for j in i + 1..n {
            let k = geo.kernel(i, j);
            if ew {
                row[i] += k * weights[j];
                row[j] += k * weights[i];
            } else {
                row[i] += k;
                row[j] += k;
            }
            if let Some(p) = pull.as_mut() {
                let (ci, cj) = if ew {
                    (k * weights[j], k * weights[i])
                } else {
                    let c = k * (weights[i] + weights[j]);
                    (c, c)
                };
                let (ei, ej) = (errors.sample(i), errors.sample(j));
                for d in 0..dim {
                    let diff = ei[d] - ej[d];
                    p[i * dim + d] += ci * diff;
                    p[j * dim + d] -= cj * diff;
                }
            }
        }
    }
    let dot: f64 = weights.iter().zip(&row).map(|(w, r)| w * r).sum();
    let s = if ew { dot } else { dot / (n * n) as f64 };
    Ok(WeightedParts { weights, s, row, pull })
}

/// `−log Σ_ij ω_ij k_ij` with the variant's weighting. Ew is `≥ 0`, Cw is
/// `≥ log N`; both bounds are attained at total collapse.
pub fn weighted_tmee_loss(errors: &ErrorSet, config: &LossConfig) -> Result<f64> {
    let parts = weighted_parts(errors, config, false)?;
    Ok(weighted_from_sum(parts.s, errors.len(), config.variant))
}

/// `−log S`, clamped at the exact lower bound so rounding cannot cross it.
pub(crate) fn weighted_from_sum(s: f64, n: usize, variant: Variant) -> f64 {
    let floor = match variant {
        Variant::CwTmee => (n as f64).ln(),
        _ => 0.0,
    };
    (-s.ln()).max(floor)
}

/// Entropy-term value for any variant.
pub fn variant_loss(errors: &ErrorSet, config: &LossConfig) -> Result<f64> {
    match config.variant {
        Variant::Tmee => tmee_loss(errors, config.sigma),
        _ => weighted_tmee_loss(errors, config),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    /// Unweighted entropy-term value; `None` during warmup.
    pub entropy: Option<f64>,
    pub alpha: f64,
}

impl LossBreakdown {
    pub fn entropy_active(&self) -> bool {
        self.entropy.is_some()
    }
}

/// MSE alone during warmup, `MSE + α · variant` afterwards.
pub fn total_loss(errors: &ErrorSet, config: &LossConfig, step: usize, total_steps: usize) -> Result<LossBreakdown> {
    config.validate()?;
    if total_steps == 0 {
        return Err(Error::config("total_steps must be positive"));
    }
    if step >= total_steps {
        return Err(Error::config(format!(
            "step {step} is past the end of a {total_steps}-step schedule"
        )));
    }
    let mse = mse_loss(errors);
    if !config.entropy_active(step, total_steps) {
        return Ok(LossBreakdown {
            total: mse,
            mse,
            entropy: None,
            alpha: config.alpha,
        });
    }
    let entropy = variant_loss(errors, config)?;
    Ok(LossBreakdown {
        total: mse + config.alpha * entropy,
        mse,
        entropy: Some(entropy),
        alpha: config.alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f64]]) -> ErrorSet {
        ErrorSet::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    fn cfg(variant: Variant) -> LossConfig {
        LossConfig {
            variant,
            ..LossConfig::default()
        }
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&set(&[&[0.0, 0.0], &[0.0, 0.0]])), 0.0);
        assert_eq!(mse_loss(&set(&[&[0.0], &[1.0]])), 0.5);
        assert_eq!(mse_loss(&set(&[&[1.0, 1.0], &[-1.0, -1.0]])), 2.0);
    }

    #[test]
    fn tmee_examples() {
        assert_eq!(tmee_loss(&set(&[&[0.2], &[0.2], &[0.2]]), 0.5).unwrap(), 0.0);
        assert_eq!(tmee_loss(&set(&[&[3.0, 1.0]]), 0.5).unwrap(), 0.0);
        // mpmath: -log((2 + 2 e^-2) / 4)
        let v = tmee_loss(&set(&[&[0.0], &[1.0]]), 0.5).unwrap();
        assert!((v - 0.566_219_169_516_972_8).abs() < 1e-14, "{v}");
    }

    #[test]
    fn weights_examples() {
        let w = chunk_weights(&set(&[&[1.0, 0.0], &[0.0, -1.0], &[0.0, 1.0]]), 0.5).unwrap();
        for x in w.iter() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = chunk_weights(&set(&[&[0.0], &[1.0]]), 0.5).unwrap();
        assert!((w[0] - 0.880_797_077_977_882_4).abs() < 1e-15);
        assert!((w[1] - 0.119_202_922_022_117_56).abs() < 1e-15);
        assert_eq!(chunk_weights(&set(&[&[7.0]]), 0.5).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn weights_survive_huge_magnitudes() {
        let w = chunk_weights(&set(&[&[1e3], &[1e3 + 1e-3], &[2e3]]), 0.5).unwrap();
        assert!(w.iter().all(|x| x.is_finite()));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w[0] > w[1] && w[1] > w[2]);
    }

    #[test]
    fn weighted_examples() {
        let collapsed = set(&[&[0.4], &[0.4], &[0.4], &[0.4]]);
        let ew = weighted_tmee_loss(&collapsed, &cfg(Variant::EwTmee)).unwrap();
        assert!(ew.abs() < 1e-15);
        let cw = weighted_tmee_loss(&collapsed, &cfg(Variant::CwTmee)).unwrap();
        assert!((cw - 4f64.ln()).abs() < 1e-15);

        // mpmath brute force of the weighted double sum
        let two = set(&[&[0.0], &[1.0]]);
        let ew = weighted_tmee_loss(&two, &cfg(Variant::EwTmee)).unwrap();
        assert!((ew - 0.200_365_572_380_011_5).abs() < 1e-14, "{ew}");
        let cw = weighted_tmee_loss(&two, &cfg(Variant::CwTmee)).unwrap();
        assert!((cw - 1.259_366_350_076_918).abs() < 1e-14, "{cw}");
    }

    #[test]
    fn tmee_variant_rejected_by_weighted_loss() {
        let e = set(&[&[0.0], &[1.0]]);
        assert!(matches!(
            weighted_tmee_loss(&e, &cfg(Variant::Tmee)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn warmup_gating() {
        let config = LossConfig::default();
        assert_eq!(config.activation_step(30_000), 10_000);
        let e = set(&[&[0.0], &[1.0]]);
        let b = total_loss(&e, &config, 0, 30_000).unwrap();
        assert!(!b.entropy_active());
        assert_eq!(b.total, b.mse);
        assert!(!total_loss(&e, &config, 9_999, 30_000).unwrap().entropy_active());
        assert!(total_loss(&e, &config, 10_000, 30_000).unwrap().entropy_active());
    }

    #[test]
    fn alpha_zero_is_plain_mse() {
        let config = LossConfig {
            alpha: 0.0,
            warmup_fraction: 0.0,
            ..LossConfig::default()
        };
        let e = set(&[&[0.0, 0.3], &[1.0, -0.2]]);
        for step in [0, 5, 9] {
            let b = total_loss(&e, &config, step, 10).unwrap();
            assert_eq!(b.total, mse_loss(&e));
        }
    }

    #[test]
    fn zero_errors_zero_total() {
        let config = LossConfig {
            warmup_fraction: 0.0,
            ..LossConfig::default()
        };
        let e = set(&[&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]]);
        let b = total_loss(&e, &config, 3, 10).unwrap();
        assert!(b.entropy_active());
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn config_validation_and_json() {
        assert!(LossConfig {
            sigma: 0.0,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            alpha: -1.0,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            warmup_fraction: 1.0,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
        let json = r#"{"sigma":1.0,"sigma_w":0.5,"alpha":0.01,"variant":"EW_TMEE","warmup_fraction":0.25}"#;
        let c: LossConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.variant, Variant::EwTmee);
        assert_eq!(serde_json::to_string(&c).unwrap(), json);
        assert!(serde_json::from_str::<LossConfig>(r#"{"sigma":1.0,"beta":2}"#).is_err());
    }

    #[test]
    fn step_past_schedule_rejected() {
        let e = set(&[&[0.0]]);
        assert!(total_loss(&e, &LossConfig::default(), 10, 10).is_err());
    }
}
