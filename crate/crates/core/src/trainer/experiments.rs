//! Multi-run experiments: paired noise-robustness comparisons and the
//! task-imbalance sweep.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{generate_tasks, train, write_json, Architecture, Policy, TaskRecipe, TrainConfig};
use crate::analysis::{coupling_ratio, Task, TaskPartition};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, ALPHA_MENU};
use crate::noise::{NoiseKind, NoiseSpec, BENCH_CAUCHY_GAMMA, DEFAULT_CAUCHY_GAMMA, DEFAULT_IMPULSE_P};

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseBenchConfig {
    pub task: TaskRecipe,
    pub architecture: Architecture,
    /// Shared training settings; `loss.alpha` and `noise` are set per arm.
    pub train: TrainConfig,
    /// Each spec's seed is offset by the run seed.
    pub noises: Vec<NoiseSpec>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for NoiseBenchConfig {
    fn default() -> Self {
        Self {
            task: TaskRecipe::default(),
            architecture: Architecture::Linear,
            train: TrainConfig {
                steps: 1500,
                learning_rate: Some(0.2),
                ..TrainConfig::default()
            },
            noises: vec![
                NoiseSpec::cauchy(BENCH_CAUCHY_GAMMA, 100),
                NoiseSpec::impulse(DEFAULT_IMPULSE_P, 200),
            ],
            alphas: ALPHA_MENU.to_vec(),
            seeds: DEFAULT_SEEDS.to_vec(),
        }
    }
}

impl NoiseBenchConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.train.validate()?;
        check_seeds(&self.seeds)?;
        if self.noises.is_empty() {
            return Err(Error::config("noise bench needs at least one noise spec"));
        }
        for spec in &self.noises {
            spec.validate()?;
        }
        if self.alphas.is_empty() {
            return Err(Error::config("noise bench needs at least one alpha"));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::config(format!("entropy-arm alphas must be positive, got {a}")));
        }
        Ok(())
    }
}

/// Clean-target MSE of both arms for one noise spec, alpha and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseBenchRow {
    pub noise: NoiseKind,
    pub noise_index: usize,
    pub seed: u64,
    pub alpha: f64,
    pub mse_only_clean: f64,
    pub tmee_clean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseComparison {
    pub noise: NoiseSpec,
    pub noise_index: usize,
    pub alpha: f64,
    pub median_mse_only: f64,
    pub median_tmee: f64,
    pub tmee_wins: usize,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseBenchReport {
    pub rows: Vec<NoiseBenchRow>,
    pub comparisons: Vec<NoiseComparison>,
    pub notes: Vec<String>,
}

impl NoiseBenchReport {
    /// Whether some alpha beats the MSE-only median for noise spec `index`.
    pub fn improved_for(&self, index: usize) -> bool {
        self.comparisons.iter().any(|c| c.noise_index == index && c.improved)
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rows = dir.join("noise_bench.csv");
        let mut w = csv::Writer::from_path(&rows)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&rows, e))?;
        let summary = dir.join("summary.json");
        write_json(self, &summary)?;
        Ok(vec![rows, summary])
    }
}

/// Trains an MSE-only arm and one MSE + entropy arm per alpha on identically
/// corrupted targets, and compares clean-target MSE.
pub fn run_noise_bench(config: &NoiseBenchConfig) -> Result<NoiseBenchReport> {
    config.validate()?;
    let jobs: Vec<(usize, u64)> = (0..config.noises.len())
        .flat_map(|i| config.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let per_job = jobs
        .par_iter()
        .map(|&(index, seed)| {
            let batch = generate_tasks(&config.task, seed)?;
            let noise = NoiseSpec {
                seed: config.noises[index].seed.wrapping_add(seed),
                ..config.noises[index].clone()
            };
            let arm = |alpha: f64| -> Result<f64> {
                let cfg = TrainConfig {
                    loss: LossConfig {
                        alpha,
                        ..config.train.loss
                    },
                    noise: noise.clone(),
                    seed,
                    ..config.train.clone()
                };
                let policy = Policy::new(config.architecture, batch.input_dim(), batch.output_dim(), seed)?;
                Ok(train(&batch, policy, &cfg)?.1.summary.clean_mse)
            };
            let baseline = arm(0.0)?;
            config
                .alphas
                .iter()
                .map(|&alpha| {
                    Ok(NoiseBenchRow {
                        noise: noise.kind,
                        noise_index: index,
                        seed,
                        alpha,
                        mse_only_clean: baseline,
                        tmee_clean: arm(alpha)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<NoiseBenchRow> = per_job.into_iter().flatten().collect();

    let mut comparisons = Vec::new();
    for (index, spec) in config.noises.iter().enumerate() {
        for &alpha in &config.alphas {
            let cell: Vec<&NoiseBenchRow> = rows
                .iter()
                .filter(|r| r.noise_index == index && r.alpha == alpha)
                .collect();
            let base: Vec<f64> = cell.iter().map(|r| r.mse_only_clean).collect();
            let ent: Vec<f64> = cell.iter().map(|r| r.tmee_clean).collect();
            let (median_mse_only, median_tmee) = (median(&base), median(&ent));
            comparisons.push(NoiseComparison {
                noise: spec.clone(),
                noise_index: index,
                alpha,
                median_mse_only,
                median_tmee,
                tmee_wins: cell.iter().filter(|r| r.tmee_clean < r.mse_only_clean).count(),
                improved: median_tmee < median_mse_only,
            });
        }
    }
    let mut notes = Vec::new();
    for spec in &config.noises {
        if spec.kind == NoiseKind::Cauchy && spec.gamma != DEFAULT_CAUCHY_GAMMA {
            notes.push(format!(
                "Cauchy scale gamma = {} differs from the reference value {DEFAULT_CAUCHY_GAMMA}",
                spec.gamma
            ));
        }
    }
    notes.push("success rate is replaced by clean-target MSE on the training inputs".into());
    Ok(NoiseBenchReport {
        rows,
        comparisons,
        notes,
    })
}

/// One-sided paired t-test critical value at 95%.
fn t_critical(df: usize) -> f64 {
    StudentsT::new(0.0, 1.0, df as f64)
        .expect("df is positive")
        .inverse_cdf(0.95)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImbalanceConfig {
    /// A `paired` recipe; `trajectories` is set to `ratio · minority` and
    /// `delta` to each overlap level.
    pub task: TaskRecipe,
    pub train: TrainConfig,
    pub ratios: Vec<usize>,
    /// Task offsets δ; small values overlap, large ones separate the tasks.
    pub overlaps: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Also train MSE-only arms as a control.
    pub control: bool,
}

impl Default for ImbalanceConfig {
    fn default() -> Self {
        Self {
            task: TaskRecipe::builtin("paired").expect("builtin"),
            train: TrainConfig {
                steps: 1500,
                learning_rate: Some(1.0),
                ..TrainConfig::default()
            },
            ratios: vec![1, 4, 10, 40],
            overlaps: vec![0.25, 100.0],
            seeds: DEFAULT_SEEDS.to_vec(),
            control: false,
        }
    }
}

impl ImbalanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.task.name != "paired" {
            return Err(Error::config(format!(
                "the imbalance sweep needs the paired task, got {:?}",
                self.task.name
            )));
        }
        self.task.validate()?;
        self.train.validate()?;
        check_seeds(&self.seeds)?;
        if self.ratios.is_empty() || self.overlaps.is_empty() {
            return Err(Error::config("the imbalance grid is empty"));
        }
        if self.ratios.contains(&0) {
            return Err(Error::config("imbalance ratios must be at least 1"));
        }
        if let Some(d) = self.overlaps.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(Error::config(format!("overlap offsets must be nonnegative, got {d}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceRow {
    pub ratio: usize,
    pub overlap: f64,
    pub seed: u64,
    pub minority_clean_mse: f64,
    pub baseline_minority_clean_mse: f64,
    pub delta: f64,
    pub r_b: f64,
    pub k_bar_ab: f64,
    pub k_bar_bb: f64,
    pub snapshot_step: usize,
    pub control_minority_clean_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceCell {
    pub ratio: usize,
    pub overlap: f64,
    pub mean_minority_clean_mse: f64,
    pub mean_baseline_minority_clean_mse: f64,
    pub mean_delta: f64,
    pub mean_r_b: f64,
    pub min_r_b: f64,
    pub max_r_b: f64,
    /// Paired t statistic of the per-seed degradations; `None` when undefined.
    pub t_stat: Option<f64>,
    pub t_critical: f64,
    pub significant_degradation: bool,
    pub mean_control_minority_clean_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport {
    pub rows: Vec<ImbalanceRow>,
    pub cells: Vec<ImbalanceCell>,
}

impl ImbalanceReport {
    pub fn cell(&self, ratio: usize, overlap: f64) -> Option<&ImbalanceCell> {
        self.cells.iter().find(|c| c.ratio == ratio && c.overlap == overlap)
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rows = dir.join("imbalance.csv");
        let mut w = csv::Writer::from_path(&rows)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&rows, e))?;
        let summary = dir.join("summary.json");
        write_json(self, &summary)?;
        Ok(vec![rows, summary])
    }
}

struct PairedRun {
    minority_mse: f64,
    r_b: f64,
    k_bar_ab: f64,
    k_bar_bb: f64,
    snapshot_step: usize,
    control: Option<f64>,
}

fn paired_run(config: &ImbalanceConfig, ratio: usize, overlap: f64, seed: u64) -> Result<PairedRun> {
    let recipe = TaskRecipe {
        trajectories: ratio * config.task.minority,
        delta: overlap,
        ..config.task.clone()
    };
    let batch = generate_tasks(&recipe, seed)?;
    let arm = |loss: LossConfig| -> Result<super::ExperimentReport> {
        let cfg = TrainConfig {
            loss,
            seed,
            ..config.train.clone()
        };
        let policy = Policy::linear(batch.input_dim(), batch.output_dim());
        Ok(train(&batch, policy, &cfg)?.1)
    };
    let report = arm(config.train.loss)?;
    let snap = report.snapshot_nearest(config.train.steps / 2);
    let partition = TaskPartition::new(batch.sample_labels())?;
    let coupling = coupling_ratio(&snap.errors, &partition, config.train.loss.sigma)?;
    let control = if config.control {
        let r = arm(LossConfig {
            alpha: 0.0,
            ..config.train.loss
        })?;
        r.clean_mse_of(Task::B)
    } else {
        None
    };
    Ok(PairedRun {
        minority_mse: report.clean_mse_of(Task::B).expect("paired batches contain task B"),
        r_b: coupling.r_b,
        k_bar_ab: coupling.k_bar_AB,
        k_bar_bb: coupling.k_bar_BB,
        snapshot_step: snap.step,
        control,
    })
}

/// Trains the paired task at every `(ratio, overlap)` cell and seed and
/// compares the minority task against the ratio-1 run of the same seed.
/// A cell's degradation is significant when the one-sided paired t test
/// over seeds rejects at 5%. Identical per-seed deltas leave the statistic
/// undefined; they count as significant only when positive.
pub fn run_imbalance_sweep(config: &ImbalanceConfig) -> Result<ImbalanceReport> {
    config.validate()?;
    let mut ratios = config.ratios.clone();
    if !ratios.contains(&1) {
        ratios.insert(0, 1);
    }
    let jobs: Vec<(usize, f64, u64)> = ratios
        .iter()
        .flat_map(|&r| {
            config
                .overlaps
                .iter()
                .flat_map(move |&o| config.seeds.iter().map(move |&s| (r, o, s)))
        })
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(r, o, s)| paired_run(config, r, o, s))
        .collect::<Result<Vec<_>>>()?;
    let find = |ratio: usize, overlap: f64, seed: u64| {
        let i = jobs
            .iter()
            .position(|j| *j == (ratio, overlap, seed))
            .expect("every cell was run");
        &runs[i]
    };

    let mut rows = Vec::with_capacity(jobs.len());
    for (&(ratio, overlap, seed), run) in jobs.iter().zip(&runs) {
        let base = find(1, overlap, seed).minority_mse;
        rows.push(ImbalanceRow {
            ratio,
            overlap,
            seed,
            minority_clean_mse: run.minority_mse,
            baseline_minority_clean_mse: base,
            delta: run.minority_mse - base,
            r_b: run.r_b,
            k_bar_ab: run.k_bar_ab,
            k_bar_bb: run.k_bar_bb,
            snapshot_step: run.snapshot_step,
            control_minority_clean_mse: run.control,
        });
    }

    let n = config.seeds.len();
    let crit = if n > 1 { t_critical(n - 1) } else { f64::INFINITY };
    let mut cells = Vec::new();
    for &ratio in &ratios {
        for &overlap in &config.overlaps {
            let cell: Vec<&ImbalanceRow> = rows
                .iter()
                .filter(|r| r.ratio == ratio && r.overlap == overlap)
                .collect();
            let deltas: Vec<f64> = cell.iter().map(|r| r.delta).collect();
            let r_bs: Vec<f64> = cell.iter().map(|r| r.r_b).collect();
            let mean_delta = mean(&deltas);
            let t_stat = (n > 1)
                .then(|| {
                    let var = deltas.iter().map(|d| (d - mean_delta).powi(2)).sum::<f64>() / (n - 1) as f64;
                    let se = (var / n as f64).sqrt();
                    (se > 0.0).then(|| mean_delta / se)
                })
                .flatten();
            let controls: Option<Vec<f64>> = cell.iter().map(|r| r.control_minority_clean_mse).collect();
            cells.push(ImbalanceCell {
                ratio,
                overlap,
                mean_minority_clean_mse: mean(&cell.iter().map(|r| r.minority_clean_mse).collect::<Vec<_>>()),
                mean_baseline_minority_clean_mse: mean(
                    &cell.iter().map(|r| r.baseline_minority_clean_mse).collect::<Vec<_>>(),
                ),
                mean_delta,
                mean_r_b: mean(&r_bs),
                min_r_b: r_bs.iter().copied().fold(f64::INFINITY, f64::min),
                max_r_b: r_bs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                t_stat,
                t_critical: crit,
                significant_degradation: match t_stat {
                    Some(t) => t > crit,
                    None => n > 1 && mean_delta > 0.0,
                },
                mean_control_minority_clean_mse: controls.map(|c| mean(&c)),
            });
        }
    }
    Ok(ImbalanceReport { rows, cells })
}
