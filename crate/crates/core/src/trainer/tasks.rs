//! Synthetic expert demonstrations.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::Task;
use crate::error::{Error, Result};
use crate::kernel::SampleIndex;

pub const BUILTIN_RECIPES: [&str; 3] = ["sinusoid", "reach_hold", "paired"];

/// Generator parameters. Fields that a generator does not use are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskRecipe {
    pub name: String,
    /// Trajectories; for `paired`, the task-A (majority) count.
    pub trajectories: usize,
    /// Task-B trajectories for `paired`.
    pub minority: usize,
    pub horizon: usize,
    pub chunk: usize,
    pub action_dim: usize,
    /// Second-harmonic amplitude for `sinusoid`; a linear policy cannot fit it.
    pub harmonic: f64,
    /// Action offset between tasks A and B for `paired`.
    pub delta: f64,
    /// Fraction of the horizon spent reaching for `reach_hold`.
    pub reach_fraction: f64,
}

impl Default for TaskRecipe {
    fn default() -> Self {
        Self {
            name: "sinusoid".into(),
            trajectories: 4,
            minority: 1,
            horizon: 16,
            chunk: 4,
            action_dim: 2,
            harmonic: 0.0,
            delta: 0.25,
            reach_fraction: 0.5,
        }
    }
}

impl TaskRecipe {
    pub fn builtin(name: &str) -> Result<Self> {
        let base = Self::default();
        let recipe = match name {
            "sinusoid" => base,
            "reach_hold" => Self {
                name: name.into(),
                horizon: 20,
                ..base
            },
            "paired" => Self {
                name: name.into(),
                trajectories: 1,
                horizon: 8,
                chunk: 2,
                ..base
            },
            other => return Err(unknown_recipe(other)),
        };
        Ok(recipe)
    }

    pub fn validate(&self) -> Result<()> {
        if !BUILTIN_RECIPES.contains(&self.name.as_str()) {
            return Err(unknown_recipe(&self.name));
        }
        for (field, v) in [
            ("trajectories", self.trajectories),
            ("horizon", self.horizon),
            ("chunk", self.chunk),
            ("action_dim", self.action_dim),
        ] {
            if v == 0 {
                return Err(Error::config(format!("task {field} must be at least 1")));
            }
        }
        if self.name == "paired" && self.minority == 0 {
            return Err(Error::config("paired task needs at least one minority trajectory"));
        }
        if (self.name == "sinusoid" || self.name == "paired") && self.horizon < 2 {
            return Err(Error::config("periodic tasks need a horizon of at least 2"));
        }
        if !self.harmonic.is_finite() || !self.delta.is_finite() {
            return Err(Error::config("task harmonic and delta must be finite"));
        }
        if !(self.reach_fraction > 0.0 && self.reach_fraction <= 1.0) {
            return Err(Error::config(format!(
                "reach_fraction must be in (0, 1], got {}",
                self.reach_fraction
            )));
        }
        Ok(())
    }
}

fn unknown_recipe(name: &str) -> Error {
    Error::config(format!(
        "unknown task recipe {name:?}; expected one of {}",
        BUILTIN_RECIPES.join(", ")
    ))
}

/// Observations are `B·T` rows of length `m`; actions are stored flat in
/// `(b, t, k, d)` order, matching the error flattening.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<f64>,
    pub task_labels: Vec<Task>,
    pub trajectories: usize,
    pub horizon: usize,
    pub chunk: usize,
    pub action_dim: usize,
}

impl TrajectoryBatch {
    pub fn new(
        observations: Vec<Vec<f64>>,
        actions: Vec<f64>,
        task_labels: Vec<Task>,
        shape: (usize, usize, usize, usize),
    ) -> Result<Self> {
        let (b, t, k, d) = shape;
        if b * t == 0 || k == 0 || d == 0 {
            return Err(Error::input("batch dimensions must be positive"));
        }
        if observations.len() != b * t || actions.len() != b * t * k * d || task_labels.len() != b {
            return Err(Error::input(format!(
                "batch shape ({b}, {t}, {k}, {d}) does not match {} observations, {} action values, {} labels",
                observations.len(),
                actions.len(),
                task_labels.len()
            )));
        }
        let m = observations[0].len();
        if m == 0 || observations.iter().any(|o| o.len() != m) {
            return Err(Error::input("observations must share a positive dimension"));
        }
        if observations.iter().flatten().chain(&actions).any(|x| !x.is_finite()) {
            return Err(Error::input("batch contains non-finite values"));
        }
        Ok(Self {
            observations,
            actions,
            task_labels,
            trajectories: b,
            horizon: t,
            chunk: k,
            action_dim: d,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.observations[0].len()
    }

    /// `K·D`, the policy output width.
    pub fn output_dim(&self) -> usize {
        self.chunk * self.action_dim
    }

    pub fn num_samples(&self) -> usize {
        self.trajectories * self.horizon * self.chunk
    }

    /// Flat action range of trajectory `b`.
    pub fn action_range(&self, b: usize) -> std::ops::Range<usize> {
        let len = self.horizon * self.output_dim();
        b * len..(b + 1) * len
    }

    pub fn provenance(&self, trajectories: &[usize]) -> Vec<SampleIndex> {
        trajectories
            .iter()
            .flat_map(|&b| (0..self.horizon).flat_map(move |t| (0..self.chunk).map(move |k| SampleIndex { b, t, k })))
            .collect()
    }

    /// Trajectory indices belonging to `task`.
    pub fn trajectories_of(&self, task: Task) -> Vec<usize> {
        (0..self.trajectories)
            .filter(|&b| self.task_labels[b] == task)
            .collect()
    }

    /// Task of each sample in `(b, t, k)` order.
    pub fn sample_labels(&self) -> Vec<Task> {
        self.task_labels
            .iter()
            .flat_map(|&task| std::iter::repeat_n(task, self.horizon * self.chunk))
            .collect()
    }
}

/// Deterministic given `seed`.
pub fn generate_tasks(recipe: &TaskRecipe, seed: u64) -> Result<TrajectoryBatch> {
    recipe.validate()?;
    match recipe.name.as_str() {
        "sinusoid" => sinusoid(recipe, seed),
        "reach_hold" => reach_hold(recipe, seed),
        "paired" => paired(recipe, seed),
        other => Err(unknown_recipe(other)),
    }
}

struct Wave {
    amp: Vec<f64>,
    phase: Vec<f64>,
    offset: Vec<f64>,
}

impl Wave {
    fn draw(rng: &mut ChaCha8Rng, dim: usize, with_offset: bool) -> Self {
        Self {
            amp: (0..dim).map(|_| rng.random_range(0.5..1.5)).collect(),
            phase: (0..dim).map(|_| rng.random_range(0.0..2.0 * PI)).collect(),
            offset: (0..dim)
                .map(|_| if with_offset { rng.random_range(-0.5..0.5) } else { 0.0 })
                .collect(),
        }
    }

    fn action(&self, phi: f64, d: usize, harmonic: f64) -> f64 {
        self.amp[d] * (phi + self.phase[d]).sin() + harmonic * (2.0 * phi + self.phase[d]).sin() + self.offset[d]
    }
}

/// `x = [sin φ, cos φ, 1]`, `φ_t = φ_b + 2πt/T`; chunk step `k` looks ahead
/// by `2πk/T`.
fn sinusoid(r: &TaskRecipe, seed: u64) -> Result<TrajectoryBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wave = Wave::draw(&mut rng, r.action_dim, true);
    let step = 2.0 * PI / r.horizon as f64;
    let mut obs = Vec::with_capacity(r.trajectories * r.horizon);
    let mut actions = Vec::with_capacity(r.trajectories * r.horizon * r.chunk * r.action_dim);
    for _ in 0..r.trajectories {
        let start = rng.random_range(0.0..2.0 * PI);
        for t in 0..r.horizon {
            let phi = start + step * t as f64;
            obs.push(vec![phi.sin(), phi.cos(), 1.0]);
            for k in 0..r.chunk {
                for d in 0..r.action_dim {
                    actions.push(wave.action(phi + step * k as f64, d, r.harmonic));
                }
            }
        }
    }
    TrajectoryBatch::new(
        obs,
        actions,
        vec![Task::A; r.trajectories],
        (r.trajectories, r.horizon, r.chunk, r.action_dim),
    )
}

/// Move from a start point to a goal over the first `reach_fraction` of the
/// horizon, then hold. `x = [τ, goal, start, 1]`.
fn reach_hold(r: &TaskRecipe, seed: u64) -> Result<TrajectoryBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = r.action_dim;
    let mut obs = Vec::with_capacity(r.trajectories * r.horizon);
    let mut actions = Vec::with_capacity(r.trajectories * r.horizon * r.chunk * dim);
    for _ in 0..r.trajectories {
        let goal: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let start: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        for t in 0..r.horizon {
            let tau = t as f64 / r.horizon as f64;
            let mut x = Vec::with_capacity(2 + 2 * dim);
            x.push(tau);
            x.extend(&goal);
            x.extend(&start);
            x.push(1.0);
            obs.push(x);
            for k in 0..r.chunk {
                let progress = ((t + k) as f64 / r.horizon as f64 / r.reach_fraction).min(1.0);
                for d in 0..dim {
                    actions.push(start[d] + (goal[d] - start[d]) * progress);
                }
            }
        }
    }
    TrajectoryBatch::new(
        obs,
        actions,
        vec![Task::A; r.trajectories],
        (r.trajectories, r.horizon, r.chunk, dim),
    )
}

/// Two tasks sharing one sinusoid. Observations are `[sin φ, cos φ, z]`
/// with `z = 1` only on task B, so B can learn a constant while A cannot.
/// Task A's expert adds `δ·(1, …, 1)/√D`, which a bias-free linear policy
/// leaves as a constant residual: the A error cloud sits about `δ` away
/// from B's. Task-A trajectories come first.
///
/// Task B's phases come from their own stream, so the minority data is the
/// same for every majority count under one seed.
fn paired(r: &TaskRecipe, seed: u64) -> Result<TrajectoryBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wave = Wave::draw(&mut rng, r.action_dim, false);
    let mut minority_rng = ChaCha8Rng::seed_from_u64(seed);
    minority_rng.set_stream(1);
    let shift = r.delta / (r.action_dim as f64).sqrt();
    let step = 2.0 * PI / r.horizon as f64;
    let total = r.trajectories + r.minority;
    let mut obs = Vec::with_capacity(total * r.horizon);
    let mut actions = Vec::with_capacity(total * r.horizon * r.chunk * r.action_dim);
    let mut labels = Vec::with_capacity(total);
    for b in 0..total {
        let task = if b < r.trajectories { Task::A } else { Task::B };
        let start = match task {
            Task::A => rng.random_range(0.0..2.0 * PI),
            Task::B => minority_rng.random_range(0.0..2.0 * PI),
        };
        let (z, offset) = match task {
            Task::A => (0.0, shift),
            Task::B => (1.0, 0.0),
        };
        labels.push(task);
        for t in 0..r.horizon {
            let phi = start + step * t as f64;
            obs.push(vec![phi.sin(), phi.cos(), z]);
            for k in 0..r.chunk {
                for d in 0..r.action_dim {
                    actions.push(wave.action(phi + step * k as f64, d, 0.0) + offset);
                }
            }
        }
    }
    TrajectoryBatch::new(obs, actions, labels, (total, r.horizon, r.chunk, r.action_dim))
}
