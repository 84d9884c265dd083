//! Analytic gradients of the loss family, the chain rule to policy
//! parameters, and a central-difference oracle used to check both.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::kernel::{pairwise_kernel_with, ErrorSet, Geometry, Reduction};
use crate::losses::{mse_loss, tmee_from_potential, weighted_from_sum, weighted_parts, LossConfig, Variant};

/// Default central-difference step at double precision. Smaller steps lose to
/// roundoff, larger ones to the O(h²) truncation term.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Samples in the default bulk cluster of [`influence_curve`].
pub const INFLUENCE_BULK_SIZE: usize = 16;
/// Bulk radius as a fraction of σ.
pub const INFLUENCE_BULK_RADIUS: f64 = 0.01;
pub const INFLUENCE_BULK_SEED: u64 = 0x1f1e_7ce5;

/// Per-sample gradients `∂L/∂e_i`, aligned with the source [`ErrorSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    grads: Vec<f64>,
    dim: usize,
    pub loss_value: f64,
}

impl GradientField {
    pub fn new(grads: Vec<f64>, dim: usize, loss_value: f64) -> Result<Self> {
        if dim == 0 || !grads.len().is_multiple_of(dim) {
            return Err(Error::input(format!(
                "gradient buffer of length {} does not split into dimension {dim}",
                grads.len()
            )));
        }
        Ok(Self { grads, dim, loss_value })
    }

    pub fn zeros_like(errors: &ErrorSet) -> Self {
        Self {
            grads: vec![0.0; errors.as_flat().len()],
            dim: errors.dim(),
            loss_value: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grad(&self, i: usize) -> &[f64] {
        &self.grads[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.grads
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            grads: self.grads.iter().map(|g| g * factor).collect(),
            dim: self.dim,
            loss_value: self.loss_value * factor,
        }
    }

    /// `self += factor · other`, loss values included.
    pub fn add_scaled(&mut self, other: &GradientField, factor: f64) -> Result<()> {
        if other.dim != self.dim || other.grads.len() != self.grads.len() {
            return Err(Error::input("gradient fields have different shapes"));
        }
        self.grads
            .iter_mut()
            .zip(&other.grads)
            .for_each(|(a, b)| *a += factor * b);
        self.loss_value += factor * other.loss_value;
        Ok(())
    }

    /// `Σ_i g_i`.
    pub fn sum_vector(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for g in self.grads.chunks_exact(self.dim) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        acc
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.grads)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / ‖b‖` over all coordinates; 0 when both vanish.
pub fn relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len(), "length mismatch");
    let diff = analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = norm(reference);
    if diff == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        diff / scale
    }
}

/// Gradient of `(1/N) Σ ‖e_i‖²`: `2 e_i / N`.
pub fn mse_gradient(errors: &ErrorSet) -> GradientField {
    let scale = 2.0 / errors.len() as f64;
    GradientField {
        grads: errors.as_flat().iter().map(|x| x * scale).collect(),
        dim: errors.dim(),
        loss_value: mse_loss(errors),
    }
}

/// `∇_{e_i} L = (2 / σ²Z) Σ_j k_ij (e_i − e_j)`; the negative of this is the
/// similarity-weighted pull of `e_i` toward the other samples.
pub fn tmee_gradient(errors: &ErrorSet, sigma: f64) -> Result<GradientField> {
    tmee_gradient_with(errors, sigma, Reduction::Deterministic)
}

pub fn tmee_gradient_with(errors: &ErrorSet, sigma: f64, mode: Reduction) -> Result<GradientField> {
    let n = errors.len();
    let dim = errors.dim();
    let (z, mut grads) = match mode {
        Reduction::Deterministic => {
            let geo = Geometry::new(errors, sigma)?;
            let mut grads = vec![0.0; n * dim];
            let mut acc = 0.0;
            for i in 0..n {
                let ei = errors.sample(i);
                let mut row = 0.0;
                for j in i + 1..n {
                    let k = geo.kernel(i, j);
                    row += k;
                    let ej = errors.sample(j);
                    for d in 0..dim {
                        let c = k * (ei[d] - ej[d]);
                        grads[i * dim + d] += c;
                        grads[j * dim + d] -= c;
                    }
                }
                acc += row;
            }
            (n as f64 + 2.0 * acc, grads)
        }
        Reduction::Parallel => {
            let km = pairwise_kernel_with(errors, sigma, Reduction::Parallel)?;
            let mut grads = vec![0.0; n * dim];
            grads.par_chunks_exact_mut(dim).enumerate().for_each(|(i, g)| {
                let ei = errors.sample(i);
                for (j, &k) in km.row(i).iter().enumerate() {
                    let ej = errors.sample(j);
                    for d in 0..dim {
                        g[d] += k * (ei[d] - ej[d]);
                    }
                }
            });
            (km.potential(), grads)
        }
    };
    let scale = 2.0 / (sigma * sigma * z);
    grads.iter_mut().for_each(|g| *g *= scale);
    Ok(GradientField {
        grads,
        dim,
        loss_value: tmee_from_potential(z, n),
    })
}

/// Analytic gradient of the Cw/Ew estimators, including the dependence of
/// the softmax weights on each `e_i`.
///
/// With `S = Σ ω_ij k_ij` and `L = −log S`:
///
/// * Ew: `∇_m L = [(2w_m/σ²) Σ_j w_j k_mj (e_m − e_j) + (2w_m/σ_w²)(u_m − S) e_m] / S`,
///   `u_m = Σ_j w_j k_mj`
/// * Cw: `∇_m L = [(1/N²σ²) Σ_j (w_m + w_j) k_mj (e_m − e_j) + (w_m/σ_w²)(r_m/N² − S) e_m] / S`,
///   `r_m = Σ_j k_mj`
pub fn weighted_tmee_gradient(errors: &ErrorSet, config: &LossConfig) -> Result<GradientField> {
    let parts = weighted_parts(errors, config, true)?;
    let pull = parts.pull.expect("pull requested");
    let n = errors.len();
    let dim = errors.dim();
    let nn = (n * n) as f64;
    let inv_sigma_sq = 1.0 / (config.sigma * config.sigma);
    let inv_sigma_w_sq = 1.0 / (config.sigma_w * config.sigma_w);
    let s = parts.s;
    let mut grads = vec![0.0; n * dim];
    for m in 0..n {
        let w = parts.weights[m];
        let (pull_coef, self_coef) = match config.variant {
            Variant::EwTmee => (2.0 * w * inv_sigma_sq, 2.0 * w * inv_sigma_w_sq * (parts.row[m] - s)),
            Variant::CwTmee => (inv_sigma_sq / nn, w * inv_sigma_w_sq * (parts.row[m] / nn - s)),
            Variant::Tmee => unreachable!("rejected by weighted_parts"),
        };
        let em = errors.sample(m);
        for d in 0..dim {
            grads[m * dim + d] = (pull_coef * pull[m * dim + d] + self_coef * em[d]) / s;
        }
    }
    Ok(GradientField {
        grads,
        dim,
        loss_value: weighted_from_sum(s, n, config.variant),
    })
}

/// Gradient of the entropy term selected by `config.variant`.
pub fn variant_gradient(errors: &ErrorSet, config: &LossConfig, mode: Reduction) -> Result<GradientField> {
    match config.variant {
        Variant::Tmee => tmee_gradient_with(errors, config.sigma, mode),
        _ => weighted_tmee_gradient(errors, config),
    }
}

/// Central differences `(L(e + hδ) − L(e − hδ)) / 2h` on every coordinate.
pub fn finite_difference_oracle<F>(loss: F, errors: &ErrorSet, h: f64) -> Result<GradientField>
where
    F: Fn(&ErrorSet) -> Result<f64>,
{
    ensure_positive("h", h)?;
    let loss_value = loss(errors)?;
    let mut probe = errors.clone();
    let mut grads = Vec::with_capacity(errors.as_flat().len());
    for c in 0..errors.as_flat().len() {
        let x = errors.as_flat()[c];
        probe.as_flat_mut()[c] = x + h;
        let plus = loss(&probe)?;
        probe.as_flat_mut()[c] = x - h;
        let minus = loss(&probe)?;
        probe.as_flat_mut()[c] = x;
        grads.push((plus - minus) / (2.0 * h));
    }
    Ok(GradientField {
        grads,
        dim: errors.dim(),
        loss_value,
    })
}

/// Same as [`finite_difference_oracle`] with coordinates spread over the
/// rayon pool; results are assembled in coordinate order.
pub fn finite_difference_oracle_par<F>(loss: F, errors: &ErrorSet, h: f64) -> Result<GradientField>
where
    F: Fn(&ErrorSet) -> Result<f64> + Sync,
{
    ensure_positive("h", h)?;
    let loss_value = loss(errors)?;
    let grads = (0..errors.as_flat().len())
        .into_par_iter()
        .map(|c| {
            let mut probe = errors.clone();
            let x = errors.as_flat()[c];
            probe.as_flat_mut()[c] = x + h;
            let plus = loss(&probe)?;
            probe.as_flat_mut()[c] = x - h;
            let minus = loss(&probe)?;
            Ok((plus - minus) / (2.0 * h))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(GradientField {
        grads,
        dim: errors.dim(),
        loss_value,
    })
}

/// Central differences over a flat parameter vector.
pub fn finite_difference_params<F>(mut loss: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    ensure_positive("h", h)?;
    let mut probe = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for c in 0..theta.len() {
        probe[c] = theta[c] + h;
        let plus = loss(&probe)?;
        probe[c] = theta[c] - h;
        let minus = loss(&probe)?;
        probe[c] = theta[c];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Vector-Jacobian products of a policy evaluated on a batch.
///
/// Sample `i` of the error set corresponds to one prediction `ŷ_i`; with
/// `e_i = ŷ_i − y_i` the error Jacobian is the identity, so the parameter
/// gradient is `Σ_i (∂ŷ_i/∂θ)ᵀ g_i`.
pub trait ParameterAdjoint {
    fn num_params(&self) -> usize;
    fn num_samples(&self) -> usize;
    fn sample_dim(&self) -> usize;
    /// Adds `(∂ŷ_i/∂θ)ᵀ g` into `out`.
    fn accumulate(&self, sample: usize, g: &[f64], out: &mut [f64]);
}

pub fn chain_to_parameters<A: ParameterAdjoint + ?Sized>(grad: &GradientField, adjoint: &A) -> Result<Vec<f64>> {
    if grad.len() != adjoint.num_samples() || grad.dim() != adjoint.sample_dim() {
        return Err(Error::input(format!(
            "gradient field is {}×{} but the adjoint expects {}×{}",
            grad.len(),
            grad.dim(),
            adjoint.num_samples(),
            adjoint.sample_dim()
        )));
    }
    let mut out = vec![0.0; adjoint.num_params()];
    for i in 0..grad.len() {
        adjoint.accumulate(i, grad.grad(i), &mut out);
    }
    Ok(out)
}

/// `ŷ_i = θ_i`: one parameter block per sample.
#[derive(Clone, Copy, Debug)]
pub struct IdentityAdjoint {
    pub samples: usize,
    pub dim: usize,
}

impl ParameterAdjoint for IdentityAdjoint {
    fn num_params(&self) -> usize {
        self.samples * self.dim
    }

    fn num_samples(&self) -> usize {
        self.samples
    }

    fn sample_dim(&self) -> usize {
        self.dim
    }

    fn accumulate(&self, sample: usize, g: &[f64], out: &mut [f64]) {
        let block = &mut out[sample * self.dim..(sample + 1) * self.dim];
        block.iter_mut().zip(g).for_each(|(o, x)| *o += x);
    }
}

/// `ŷ_i = W x_i` with `W` stored row-major (`output × input`).
#[derive(Clone, Debug)]
pub struct LinearAdjoint<'a> {
    pub inputs: &'a [Vec<f64>],
    pub output_dim: usize,
}

impl LinearAdjoint<'_> {
    pub fn predict(&self, weights: &[f64]) -> Vec<Vec<f64>> {
        let m = self.inputs.first().map_or(0, Vec::len);
        self.inputs
            .iter()
            .map(|x| {
                (0..self.output_dim)
                    .map(|r| weights[r * m..(r + 1) * m].iter().zip(x).map(|(w, v)| w * v).sum())
                    .collect()
            })
            .collect()
    }
}

impl ParameterAdjoint for LinearAdjoint<'_> {
    fn num_params(&self) -> usize {
        self.output_dim * self.inputs.first().map_or(0, Vec::len)
    }

    fn num_samples(&self) -> usize {
        self.inputs.len()
    }

    fn sample_dim(&self) -> usize {
        self.output_dim
    }

    fn accumulate(&self, sample: usize, g: &[f64], out: &mut [f64]) {
        let x = &self.inputs[sample];
        let m = x.len();
        for (r, gr) in g.iter().enumerate() {
            for (c, xc) in x.iter().enumerate() {
                out[r * m + c] += gr * xc;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluencePoint {
    pub c: f64,
    pub tmee_grad_norm: f64,
    pub mse_grad_norm: f64,
    /// `c · exp(−c²/2)`.
    pub envelope: f64,
}

/// Tight bulk cluster: samples uniform in a ball of radius `0.01σ` around the origin.
pub fn default_bulk(dim: usize, sigma: f64, seed: u64) -> Result<ErrorSet> {
    ensure_positive("sigma", sigma)?;
    if dim == 0 {
        return Err(Error::config("bulk dimension must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = INFLUENCE_BULK_RADIUS * sigma;
    let samples = (0..INFLUENCE_BULK_SIZE)
        .map(|_| {
            let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let len = norm(&dir).max(f64::MIN_POSITIVE);
            let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
            dir.into_iter().map(|x| x / len * r).collect()
        })
        .collect();
    ErrorSet::new(samples)
}

/// Places one outlier at `bulk_mean + c·σ·x̂` for each `c` and reports the
/// T-MEE and MSE gradient norms at the outlier.
pub fn influence_curve(bulk: &ErrorSet, cs: &[f64], sigma: f64) -> Result<Vec<InfluencePoint>> {
    ensure_positive("sigma", sigma)?;
    if let Some(c) = cs.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
        return Err(Error::config(format!(
            "outlier distance multiples must be positive, got {c}"
        )));
    }
    let dim = bulk.dim();
    let n = bulk.len();
    let mut center = vec![0.0; dim];
    for s in bulk.samples() {
        center.iter_mut().zip(s).for_each(|(a, x)| *a += x / n as f64);
    }
    cs.iter()
        .map(|&c| {
            let mut data = bulk.as_flat().to_vec();
            let mut outlier = center.clone();
            outlier[0] += c * sigma;
            data.extend_from_slice(&outlier);
            let set = ErrorSet::from_flat(data, dim)?;
            let tmee = tmee_gradient(&set, sigma)?;
            let mse = mse_gradient(&set);
            Ok(InfluencePoint {
                c,
                tmee_grad_norm: norm(tmee.grad(n)),
                mse_grad_norm: norm(mse.grad(n)),
                envelope: c * (-c * c / 2.0).exp(),
            })
        })
        .collect()
}

pub fn write_influence_csv<W: Write>(points: &[InfluencePoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["c", "tmee_grad_norm", "mse_grad_norm", "envelope"])?;
    for p in points {
        w.write_record([
            p.c.to_string(),
            p.tmee_grad_norm.to_string(),
            p.mse_grad_norm.to_string(),
            p.envelope.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}
