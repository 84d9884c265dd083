//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use entroshape::analysis::Task;
use entroshape::gradients::{DEFAULT_FD_STEP, INFLUENCE_BULK_SEED};
use entroshape::kernel::Reduction;
use entroshape::losses::{LossConfig, Variant};
use entroshape::noise::NoiseSpec;
use entroshape::trainer::{Architecture, ImbalanceConfig, NoiseBenchConfig, TaskRecipe, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Top-level JSON config. Every section is optional and falls back to its
/// defaults; unknown keys are rejected at every level.
///
/// `loss` and `noise`, when present, override `train.loss` and `train.noise`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub loss: Option<LossConfig>,
    pub noise: Option<NoiseSpec>,
    pub task: Option<TaskRecipe>,
    pub policy: Option<Architecture>,
    pub train: Option<TrainConfig>,
    pub grad_check: Option<GradCheckConfig>,
    pub noise_bench: Option<NoiseBenchConfig>,
    pub imbalance: Option<ImbalanceConfig>,
    pub influence: Option<InfluenceConfig>,
    pub entropy_curve: Option<EntropyCurveConfig>,
    pub pca: Option<PcaConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub sizes: Vec<usize>,
    pub dims: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub variants: Vec<Variant>,
    /// Random instances per grid point.
    pub instances: usize,
    pub h: f64,
    pub tmee_tolerance: f64,
    pub weighted_tolerance: f64,
    /// Error coordinates are drawn from N(0, (spread·σ)²).
    pub spread: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            sizes: vec![2, 8, 32, 64],
            dims: vec![1, 3, 8],
            sigmas: vec![0.5, 1.0, 2.0],
            variants: vec![Variant::Tmee, Variant::CwTmee, Variant::EwTmee],
            instances: 2,
            h: DEFAULT_FD_STEP,
            tmee_tolerance: 1e-6,
            weighted_tolerance: 1e-5,
            spread: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InfluenceConfig {
    /// Outlier distances in units of σ.
    pub cs: Vec<f64>,
    pub sigma: f64,
    pub dim: usize,
    pub bulk_seed: u64,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        Self {
            cs: (1..=100).map(|i| i as f64 / 10.0).collect(),
            sigma: 0.5,
            dim: 2,
            bulk_seed: INFLUENCE_BULK_SEED,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyCurveConfig {
    /// A directory written by `train`.
    pub run_dir: Option<PathBuf>,
    /// Defaults to the run's loss bandwidth.
    pub sigma: Option<f64>,
    pub tolerance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcaConfig {
    /// An error-set CSV; mutually exclusive with `run_dir`.
    pub input: Option<PathBuf>,
    /// A `train` run directory; the snapshot at `step` (default: last) is used.
    pub run_dir: Option<PathBuf>,
    pub step: Option<usize>,
    pub components: usize,
    /// Restrict to one task's samples (needs `run_dir`).
    pub task: Option<Task>,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self {
            input: None,
            run_dir: None,
            step: None,
            components: 2,
            task: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    /// Training settings with the top-level `loss`, `noise`, seed and
    /// reduction mode folded in.
    pub fn resolved_train(&self, seed: u64, reduction: Reduction) -> TrainConfig {
        let mut train = self.train.clone().unwrap_or_default();
        if let Some(loss) = self.loss {
            train.loss = loss;
        }
        if let Some(noise) = &self.noise {
            train.noise = noise.clone();
        }
        train.seed = seed;
        train.reduction = reduction;
        train
    }

    /// SHA-256 of the canonical JSON of this config plus the reduction
    /// mode. The output directory is left out, so relocating outputs keeps
    /// the hash.
    pub fn hash(&self, deterministic: bool) -> String {
        let mut copy = self.clone();
        copy.output_dir = None;
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&copy).expect("config serializes"));
        let mode: &[u8] = if deterministic {
            b"\ndeterministic"
        } else {
            b"\nparallel"
        };
        hasher.update(mode);
        hex::encode(hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(ExperimentConfig::from_json(r#"{"sede": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"loss": {"sigma": 0.5, "beta": 1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"loss": {"alfa": 0.1}}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"noise": {"kind": "CAUCHY", "scale": 1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"grad_check": {"size": [2]}}"#).is_err());
    }

    #[test]
    fn hash_tracks_every_field_but_the_output_dir() {
        let base = ExperimentConfig::from_json(r#"{"seed": 3, "loss": {"alpha": 0.1}}"#).unwrap();
        let moved = ExperimentConfig {
            output_dir: Some("elsewhere".into()),
            ..base.clone()
        };
        assert_eq!(base.hash(true), moved.hash(true));
        assert_ne!(base.hash(true), base.hash(false));
        let changed = ExperimentConfig::from_json(r#"{"seed": 3, "loss": {"alpha": 0.2}}"#).unwrap();
        assert_ne!(base.hash(true), changed.hash(true));
        let reseeded = ExperimentConfig::from_json(r#"{"seed": 4, "loss": {"alpha": 0.1}}"#).unwrap();
        assert_ne!(base.hash(true), reseeded.hash(true));
    }

    #[test]
    fn top_level_sections_override_train() {
        let c =
            ExperimentConfig::from_json(r#"{"loss": {"alpha": 1.0}, "train": {"steps": 7, "loss": {"alpha": 0.5}}}"#)
                .unwrap();
        let t = c.resolved_train(9, Reduction::Parallel);
        assert_eq!(
            (t.loss.alpha, t.steps, t.seed, t.reduction),
            (1.0, 7, 9, Reduction::Parallel)
        );
    }
}
