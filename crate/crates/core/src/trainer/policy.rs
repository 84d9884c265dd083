//! Linear and one-hidden-layer policies with hand-written backprop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::ParameterAdjoint;

pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Architecture {
    #[default]
    Linear,
    Mlp2,
}

impl Architecture {
    pub fn default_learning_rate(self) -> f64 {
        match self {
            Architecture::Linear => 1e-2,
            Architecture::Mlp2 => 1e-3,
        }
    }
}

/// `LINEAR`: `ŷ = W x`, no bias (`x` carries its own constant feature when
/// the task wants one).
/// `MLP2`: `ŷ = W₂ tanh(W₁ x + b₁) + b₂`, parameters laid out as
/// `[W₁, b₁, W₂, b₂]` with row-major matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub architecture: Architecture,
    input_dim: usize,
    output_dim: usize,
    hidden: usize,
    params: Vec<f64>,
}

/// Cached forward pass over a batch of inputs.
#[derive(Clone, Debug)]
pub struct Forward {
    pub outputs: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
}

impl Policy {
    /// Zero-initialised linear map.
    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        Self {
            architecture: Architecture::Linear,
            input_dim,
            output_dim,
            hidden: 0,
            params: vec![0.0; input_dim * output_dim],
        }
    }

    /// Weights uniform in `±1/√fan_in`, zero biases.
    pub fn mlp2(input_dim: usize, output_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(hidden * (input_dim + 1) + output_dim * (hidden + 1));
        let s1 = 1.0 / (input_dim as f64).sqrt();
        params.extend((0..hidden * input_dim).map(|_| rng.random_range(-s1..s1)));
        params.extend(std::iter::repeat_n(0.0, hidden));
        let s2 = 1.0 / (hidden as f64).sqrt();
        params.extend((0..output_dim * hidden).map(|_| rng.random_range(-s2..s2)));
        params.extend(std::iter::repeat_n(0.0, output_dim));
        Self {
            architecture: Architecture::Mlp2,
            input_dim,
            output_dim,
            hidden,
            params,
        }
    }

    pub fn new(architecture: Architecture, input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::config("policy dimensions must be positive"));
        }
        Ok(match architecture {
            Architecture::Linear => Self::linear(input_dim, output_dim),
            Architecture::Mlp2 => Self::mlp2(input_dim, output_dim, DEFAULT_HIDDEN, seed),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::input(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Offsets of `[W₁, b₁, W₂, b₂]`.
    fn layout(&self) -> [usize; 4] {
        let w1 = 0;
        let b1 = self.hidden * self.input_dim;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.output_dim * self.hidden;
        [w1, b1, w2, b2]
    }

    pub fn forward(&self, inputs: &[Vec<f64>]) -> Result<Forward> {
        if let Some(x) = inputs.iter().find(|x| x.len() != self.input_dim) {
            return Err(Error::input(format!(
                "policy expects inputs of length {}, got {}",
                self.input_dim,
                x.len()
            )));
        }
        let m = self.input_dim;
        match self.architecture {
            Architecture::Linear => Ok(Forward {
                outputs: inputs
                    .iter()
                    .map(|x| affine(&self.params, None, x, self.output_dim, m))
                    .collect(),
                hidden: Vec::new(),
            }),
            Architecture::Mlp2 => {
                let [w1, b1, w2, b2] = self.layout();
                let h = self.hidden;
                let hidden: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|x| {
                        let mut a = affine(&self.params[w1..b1], Some(&self.params[b1..w2]), x, h, m);
                        a.iter_mut().for_each(|v| *v = v.tanh());
                        a
                    })
                    .collect();
                let outputs = hidden
                    .iter()
                    .map(|a| affine(&self.params[w2..b2], Some(&self.params[b2..]), a, self.output_dim, h))
                    .collect();
                Ok(Forward { outputs, hidden })
            }
        }
    }

    pub fn predict(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward(inputs)?.outputs)
    }
}

fn affine(w: &[f64], b: Option<&[f64]>, x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            let dot: f64 = w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum();
            dot + b.map_or(0.0, |b| b[r])
        })
        .collect()
}

/// Adjoint of a policy evaluated on `inputs`, where each input row emits
/// `chunk` error samples of width `output_dim / chunk`. Sample `i` belongs
/// to input row `i / chunk`, output block `i % chunk`.
pub struct PolicyTape<'a> {
    pub policy: &'a Policy,
    pub inputs: &'a [Vec<f64>],
    pub forward: &'a Forward,
    pub chunk: usize,
}

impl ParameterAdjoint for PolicyTape<'_> {
    fn num_params(&self) -> usize {
        self.policy.num_params()
    }

    fn num_samples(&self) -> usize {
        self.inputs.len() * self.chunk
    }

    fn sample_dim(&self) -> usize {
        self.policy.output_dim / self.chunk
    }

    fn accumulate(&self, sample: usize, g: &[f64], out: &mut [f64]) {
        let row = sample / self.chunk;
        let first = (sample % self.chunk) * g.len();
        let x = &self.inputs[row];
        let m = self.policy.input_dim;
        match self.policy.architecture {
            Architecture::Linear => {
                for (o, gv) in g.iter().enumerate() {
                    let base = (first + o) * m;
                    for (c, xc) in x.iter().enumerate() {
                        out[base + c] += gv * xc;
                    }
                }
            }
            Architecture::Mlp2 => {
                let [w1, b1, w2, b2] = self.policy.layout();
                let h = self.policy.hidden;
                let a = &self.forward.hidden[row];
                let params = &self.policy.params;
                let mut da = vec![0.0; h];
                for (o, gv) in g.iter().enumerate() {
                    let r = first + o;
                    out[b2 + r] += gv;
                    for j in 0..h {
                        out[w2 + r * h + j] += gv * a[j];
                        da[j] += gv * params[w2 + r * h + j];
                    }
                }
                for j in 0..h {
                    let dz = da[j] * (1.0 - a[j] * a[j]);
                    out[b1 + j] += dz;
                    for (c, xc) in x.iter().enumerate() {
                        out[w1 + j * m + c] += dz * xc;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradients::{chain_to_parameters, finite_difference_params, relative_error, tmee_gradient};
    use crate::kernel::ErrorSet;
    use crate::losses::tmee_loss;

    fn errors_for(policy: &Policy, inputs: &[Vec<f64>], targets: &[f64], dim: usize) -> Result<ErrorSet> {
        let pred: Vec<f64> = policy.predict(inputs)?.into_iter().flatten().collect();
        ErrorSet::from_flat(pred.iter().zip(targets).map(|(p, t)| p - t).collect(), dim)
    }

    fn check(arch: Architecture) {
        let inputs: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos(), 1.0])
            .collect();
        let targets: Vec<f64> = (0..6 * 4).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut policy = Policy::new(arch, 3, 4, 9).unwrap();
        if arch == Architecture::Linear {
            let p: Vec<f64> = (0..policy.num_params()).map(|i| 0.1 * i as f64 - 0.5).collect();
            policy.set_params(&p).unwrap();
        }
        // chunk 2 of width 2
        let e = errors_for(&policy, &inputs, &targets, 2).unwrap();
        let g = tmee_gradient(&e, 0.5).unwrap();
        let fwd = policy.forward(&inputs).unwrap();
        let tape = PolicyTape {
            policy: &policy,
            inputs: &inputs,
            forward: &fwd,
            chunk: 2,
        };
        let analytic = chain_to_parameters(&g, &tape).unwrap();
        let mut probe = policy.clone();
        let fd = finite_difference_params(
            |theta| {
                probe.set_params(theta)?;
                tmee_loss(&errors_for(&probe, &inputs, &targets, 2)?, 0.5)
            },
            policy.params(),
            1e-6,
        )
        .unwrap();
        let rel = relative_error(&analytic, &fd);
        assert!(rel < 1e-6, "{arch:?}: {rel}");
    }

    #[test]
    fn linear_backprop_matches_fd() {
        check(Architecture::Linear);
    }

    #[test]
    fn mlp_backprop_matches_fd() {
        check(Architecture::Mlp2);
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(Policy::linear(3, 8).num_params(), 24);
        assert_eq!(Policy::mlp2(3, 8, 32, 0).num_params(), 32 * 3 + 32 + 8 * 32 + 8);
        assert!(Policy::new(Architecture::Linear, 0, 2, 0).is_err());
        assert_eq!(Architecture::Linear.default_learning_rate(), 1e-2);
        assert_eq!(Architecture::Mlp2.default_learning_rate(), 1e-3);
    }
}
