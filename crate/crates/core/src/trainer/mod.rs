//! Behavior cloning on synthetic trajectories with the MSE + T-MEE objective.

mod experiments;
mod policy;
mod tasks;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use experiments::{
    run_imbalance_sweep, run_noise_bench, ImbalanceCell, ImbalanceConfig, ImbalanceReport, ImbalanceRow,
    NoiseBenchConfig, NoiseBenchReport, NoiseBenchRow, NoiseComparison,
};
pub use policy::{Architecture, Forward, Policy, PolicyTape, DEFAULT_HIDDEN};
pub use tasks::{generate_tasks, TaskRecipe, TrajectoryBatch, BUILTIN_RECIPES};

use crate::analysis::Task;
use crate::error::{ensure_positive, Error, Result};
use crate::gradients::{
    chain_to_parameters, finite_difference_params, mse_gradient, norm, relative_error, variant_gradient,
};
use crate::kernel::{ErrorSet, Reduction};
use crate::losses::{mse_loss, tmee_loss_with, variant_loss, LossConfig, Variant};
use crate::noise::{corrupt_actions, NoiseSpec};

pub const DEFAULT_SNAPSHOT_EVERY: usize = 250;
pub const VERIFY_TOLERANCE: f64 = 1e-5;
const VERIFY_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub steps: usize,
    /// Falls back to the architecture default when absent.
    pub learning_rate: Option<f64>,
    /// Trajectories per step; full batch when absent.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub noise: NoiseSpec,
    pub snapshot_every: usize,
    /// Check parameter gradients against finite differences every this many steps.
    pub verify_every: Option<usize>,
    pub reduction: Reduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            steps: 3000,
            learning_rate: None,
            batch_size: None,
            seed: 0,
            noise: NoiseSpec::default(),
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
            verify_every: None,
            reduction: Reduction::Deterministic,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.noise.validate()?;
        if self.steps == 0 {
            return Err(Error::config("steps must be positive"));
        }
        if let Some(lr) = self.learning_rate {
            ensure_positive("learning_rate", lr)?;
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.snapshot_every == 0 {
            return Err(Error::config("snapshot_every must be positive"));
        }
        if self.verify_every == Some(0) {
            return Err(Error::config("verify_every must be positive"));
        }
        Ok(())
    }

    pub fn learning_rate_for(&self, architecture: Architecture) -> f64 {
        self.learning_rate.unwrap_or(architecture.default_learning_rate())
    }
}

/// One row of `metrics.csv`, evaluated before that step's update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub total: f64,
    pub mse: f64,
    /// Rényi entropy of the step's errors, logged in every phase.
    pub entropy: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub errors: ErrorSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMse {
    pub task: Task,
    pub clean_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub metrics: Vec<StepMetrics>,
    pub snapshots: Vec<Snapshot>,
    pub summary: RunSummary,
}

/// Everything in `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub activation_step: usize,
    pub learning_rate: f64,
    pub loss: LossConfig,
    pub noise: NoiseSpec,
    /// MSE of the final policy against the uncorrupted targets.
    pub clean_mse: f64,
    pub clean_mse_by_task: Vec<TaskMse>,
    /// Task of each trajectory, indexed by `b`.
    pub task_labels: Vec<Task>,
    pub final_entropy: f64,
    pub entropy_at_activation: Option<f64>,
    pub verified_steps: Vec<usize>,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn entropy_at(&self, step: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.step == step).map(|m| m.entropy)
    }

    pub fn final_metrics(&self) -> &StepMetrics {
        self.metrics.last().expect("a run has at least one step")
    }

    pub fn snapshot_nearest(&self, step: usize) -> &Snapshot {
        self.snapshots
            .iter()
            .min_by_key(|s| s.step.abs_diff(step))
            .expect("a run has at least one snapshot")
    }

    pub fn clean_mse_of(&self, task: Task) -> Option<f64> {
        self.summary
            .clean_mse_by_task
            .iter()
            .find(|t| t.task == task)
            .map(|t| t.clean_mse)
    }
}

fn gather_inputs(batch: &TrajectoryBatch, trajectories: &[usize]) -> Vec<Vec<f64>> {
    trajectories
        .iter()
        .flat_map(|&b| {
            batch.observations[b * batch.horizon..(b + 1) * batch.horizon]
                .iter()
                .cloned()
        })
        .collect()
}

fn gather_targets(batch: &TrajectoryBatch, targets: &[f64], trajectories: &[usize]) -> Vec<f64> {
    trajectories
        .iter()
        .flat_map(|&b| targets[batch.action_range(b)].iter().copied())
        .collect()
}

fn errors_from(outputs: &[Vec<f64>], targets: &[f64]) -> Option<Vec<f64>> {
    let e: Vec<f64> = outputs.iter().flatten().zip(targets).map(|(p, t)| p - t).collect();
    e.iter().all(|x| x.is_finite()).then_some(e)
}

/// MSE of `policy` against the clean actions of `trajectories`.
pub fn clean_mse(policy: &Policy, batch: &TrajectoryBatch, trajectories: &[usize]) -> Result<f64> {
    let inputs = gather_inputs(batch, trajectories);
    let targets = gather_targets(batch, &batch.actions, trajectories);
    let out = policy.predict(&inputs)?;
    let e: Vec<f64> = out.iter().flatten().zip(&targets).map(|(p, t)| p - t).collect();
    Ok(mse_loss(&ErrorSet::from_flat(e, batch.action_dim)?))
}

/// Objective value at one step: MSE, plus `α · variant` once active.
fn objective(errors: &ErrorSet, loss: &LossConfig, active: bool) -> Result<f64> {
    let mse = mse_loss(errors);
    if active && loss.alpha > 0.0 {
        Ok(mse + loss.alpha * variant_loss(errors, loss)?)
    } else {
        Ok(mse)
    }
}

/// Full-batch (or seeded minibatch) gradient descent.
///
/// Training targets are the batch actions corrupted by `config.noise`; the
/// reported clean MSE uses the uncorrupted actions. The entropy term is
/// gated by a hard switch at `⌈warmup_fraction · steps⌉`.
pub fn train(batch: &TrajectoryBatch, mut policy: Policy, config: &TrainConfig) -> Result<(Policy, ExperimentReport)> {
    config.validate()?;
    if policy.input_dim() != batch.input_dim() || policy.output_dim() != batch.output_dim() {
        return Err(Error::config(format!(
            "policy maps {} → {} but the batch needs {} → {}",
            policy.input_dim(),
            policy.output_dim(),
            batch.input_dim(),
            batch.output_dim()
        )));
    }
    let loss = config.loss;
    let steps = config.steps;
    let lr = config.learning_rate_for(policy.architecture);
    let activation = loss.activation_step(steps);
    let dim = batch.action_dim;
    let targets = corrupt_actions(&batch.actions, &config.noise)?;
    let everything: Vec<usize> = (0..batch.trajectories).collect();
    let mut sampler = ChaCha8Rng::seed_from_u64(config.seed);
    let minibatch = config.batch_size.filter(|&s| s < batch.trajectories);

    let full_inputs = gather_inputs(batch, &everything);
    let mut metrics = Vec::with_capacity(steps);
    let mut snapshots = Vec::new();
    let mut verified_steps = Vec::new();

    for step in 0..steps {
        let rows = match minibatch {
            Some(size) => {
                let mut picked = sample(&mut sampler, batch.trajectories, size).into_vec();
                picked.sort_unstable();
                picked
            }
            None => everything.clone(),
        };
        let inputs_owned;
        let inputs = if minibatch.is_some() {
            inputs_owned = gather_inputs(batch, &rows);
            &inputs_owned
        } else {
            &full_inputs
        };
        let step_targets = gather_targets(batch, &targets, &rows);
        let fwd = policy.forward(inputs)?;
        let flat = errors_from(&fwd.outputs, &step_targets).ok_or_else(|| Error::Diverged {
            step,
            reason: "non-finite prediction".into(),
        })?;
        let errors = ErrorSet::from_flat(flat, dim)?;

        let active = loss.entropy_active(step, steps);
        let mse = mse_loss(&errors);
        let mut grad = mse_gradient(&errors);
        let mut total = mse;
        let entropy = if active && loss.alpha > 0.0 {
            let g = variant_gradient(&errors, &loss, config.reduction)?;
            grad.add_scaled(&g, loss.alpha)?;
            total = mse + loss.alpha * g.loss_value;
            // the deterministic T-MEE gradient accumulates Z in the same order as tmee_loss
            if loss.variant == Variant::Tmee && config.reduction == Reduction::Deterministic {
                g.loss_value
            } else {
                tmee_loss_with(&errors, loss.sigma, config.reduction)?
            }
        } else {
            tmee_loss_with(&errors, loss.sigma, config.reduction)?
        };

        let tape = PolicyTape {
            policy: &policy,
            inputs,
            forward: &fwd,
            chunk: batch.chunk,
        };
        let param_grad = chain_to_parameters(&grad, &tape)?;
        let grad_norm = norm(&param_grad);
        if !(total.is_finite() && grad_norm.is_finite()) {
            return Err(Error::Diverged {
                step,
                reason: format!("loss {total}, gradient norm {grad_norm}"),
            });
        }

        if config.verify_every.is_some_and(|every| step % every == 0) {
            let mut probe = policy.clone();
            let fd = finite_difference_params(
                |theta| {
                    probe.set_params(theta)?;
                    let out = probe.predict(inputs)?;
                    let e: Vec<f64> = out.iter().flatten().zip(&step_targets).map(|(p, t)| p - t).collect();
                    objective(&ErrorSet::from_flat(e, dim)?, &loss, active)
                },
                policy.params(),
                VERIFY_STEP,
            )?;
            let rel_err = relative_error(&param_grad, &fd);
            if rel_err > VERIFY_TOLERANCE {
                return Err(Error::GradientMismatch {
                    step,
                    rel_err,
                    tolerance: VERIFY_TOLERANCE,
                });
            }
            verified_steps.push(step);
        }

        metrics.push(StepMetrics {
            step,
            total,
            mse,
            entropy,
            grad_norm,
        });
        if step % config.snapshot_every == 0 || step + 1 == steps {
            let provenance = batch.provenance(&rows);
            snapshots.push(Snapshot {
                step,
                errors: errors.with_provenance(provenance)?,
            });
        }

        policy
            .params_mut()
            .iter_mut()
            .zip(&param_grad)
            .for_each(|(p, g)| *p -= lr * g);
    }

    let mut by_task = Vec::new();
    for task in [Task::A, Task::B] {
        let rows = batch.trajectories_of(task);
        if !rows.is_empty() {
            by_task.push(TaskMse {
                task,
                clean_mse: clean_mse(&policy, batch, &rows)?,
            });
        }
    }
    let final_clean = clean_mse(&policy, batch, &everything)?;
    let final_entropy = metrics.last().map_or(0.0, |m| m.entropy);
    let entropy_at_activation = metrics.get(activation).map(|m| m.entropy);
    let mut notes = Vec::new();
    if minibatch.is_some() {
        notes.push("minibatch errors: entropy and snapshots cover the sampled trajectories only".into());
    }
    let summary = RunSummary {
        steps,
        activation_step: activation,
        learning_rate: lr,
        loss,
        noise: config.noise.clone(),
        clean_mse: final_clean,
        clean_mse_by_task: by_task,
        task_labels: batch.task_labels.clone(),
        final_entropy,
        entropy_at_activation,
        verified_steps,
        notes,
    };
    Ok((
        policy,
        ExperimentReport {
            metrics,
            snapshots,
            summary,
        },
    ))
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn snapshot_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(SNAPSHOT_DIR).join(format!("step_{step:06}.csv"))
}

pub fn write_metrics_csv(metrics: &[StepMetrics], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<StepMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes `metrics.csv`, `snapshots/step_NNNNNN.csv` and `summary.json`
/// and returns the paths written, in that order.
pub fn write_run_dir(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let snap_dir = dir.join(SNAPSHOT_DIR);
    fs::create_dir_all(&snap_dir).map_err(|e| Error::io(&snap_dir, e))?;
    let mut written = Vec::with_capacity(report.snapshots.len() + 2);
    let metrics = dir.join(METRICS_FILE);
    write_metrics_csv(&report.metrics, &metrics)?;
    written.push(metrics);
    for snap in &report.snapshots {
        let path = snapshot_path(dir, snap.step);
        snap.errors.save_csv(&path)?;
        written.push(path);
    }
    let summary = dir.join(SUMMARY_FILE);
    write_json(&report.summary, &summary)?;
    written.push(summary);
    Ok(written)
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads every snapshot of a run directory, sorted by step.
pub fn read_snapshots(dir: &Path) -> Result<Vec<(usize, ErrorSet)>> {
    let snap_dir = dir.join(SNAPSHOT_DIR);
    let entries = fs::read_dir(&snap_dir).map_err(|e| Error::io(&snap_dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&snap_dir, e))?.path();
        let Some(step) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_")?.strip_suffix(".csv"))
            .and_then(|n| n.parse::<usize>().ok())
        else {
            continue;
        };
        out.push((step, ErrorSet::load_csv(&path)?));
    }
    out.sort_by_key(|(s, _)| *s);
    Ok(out)
}
