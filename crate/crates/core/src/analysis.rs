//! Diagnostics on error sets: the Rényi estimate, the Taylor expansion of
//! the information potential, task-coupling ratios and PCA projections.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::kernel::{information_potential, ErrorSet, Geometry};
use crate::losses::tmee_loss;

pub const MAX_TAYLOR_ORDER: usize = 6;

/// Quadratic Rényi entropy of the Parzen density over the samples. This is
/// the T-MEE loss itself and is computed by the same routine.
pub fn renyi_entropy_estimate(errors: &ErrorSet, sigma: f64) -> Result<f64> {
    tmee_loss(errors, sigma)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaylorExpansion {
    pub approx: f64,
    /// `terms[0] = N²`, `terms[k]` is the order-`k` correction.
    pub terms: Vec<f64>,
}

/// Truncated expansion of `Z` in powers of `1/σ²`:
/// `term_k = (−1)^k / (k! 2^k σ^{2k}) · Σ_{t,s} ‖e_t − e_s‖^{2k}`.
pub fn taylor_potential(errors: &ErrorSet, sigma: f64, order: usize) -> Result<TaylorExpansion> {
    ensure_positive("sigma", sigma)?;
    if !(1..=MAX_TAYLOR_ORDER).contains(&order) {
        return Err(Error::config(format!(
            "taylor order must be in [1, {MAX_TAYLOR_ORDER}], got {order}"
        )));
    }
    let n = errors.len();
    // power_sums[k] = Σ_{t<s} ‖e_t − e_s‖^{2k}
    let mut power_sums = vec![0.0; order + 1];
    for i in 0..n {
        let ei = errors.sample(i);
        for j in i + 1..n {
            let d2: f64 = ei.iter().zip(errors.sample(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            let mut p = 1.0;
            for slot in power_sums.iter_mut().skip(1) {
                p *= d2;
                *slot += p;
            }
        }
    }
    let mut terms = Vec::with_capacity(order + 1);
    terms.push((n * n) as f64);
    let mut coef = 1.0;
    for (k, &sum) in power_sums.iter().enumerate().skip(1) {
        coef *= -1.0 / (k as f64 * 2.0 * sigma * sigma);
        terms.push(coef * 2.0 * sum);
    }
    Ok(TaylorExpansion {
        approx: terms.iter().sum(),
        terms,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

/// `Σ_{t,s} ‖e_t − e_s‖² = 2N Σ_t ‖e_t − ē‖²`, the link between the first
/// Taylor term and the spread of the errors about their mean.
pub fn msr_identity_check(errors: &ErrorSet) -> IdentityCheck {
    let n = errors.len();
    let dim = errors.dim();
    let mut lhs = 0.0;
    for i in 0..n {
        let ei = errors.sample(i);
        for j in i + 1..n {
            lhs += ei
                .iter()
                .zip(errors.sample(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
    }
    lhs *= 2.0;
    let mean = column_means(errors);
    let spread: f64 = errors
        .samples()
        .map(|e| (0..dim).map(|d| (e[d] - mean[d]).powi(2)).sum::<f64>())
        .sum();
    let rhs = 2.0 * n as f64 * spread;
    let scale = lhs.abs().max(rhs.abs());
    let residual = if scale == 0.0 { 0.0 } else { (lhs - rhs).abs() / scale };
    IdentityCheck { lhs, rhs, residual }
}

fn column_means(errors: &ErrorSet) -> Vec<f64> {
    let n = errors.len() as f64;
    let mut mean = vec![0.0; errors.dim()];
    for e in errors.samples() {
        mean.iter_mut().zip(e).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskPartition {
    labels: Vec<Task>,
    n_a: usize,
    n_b: usize,
}

impl TaskPartition {
    pub fn new(labels: Vec<Task>) -> Result<Self> {
        let n_a = labels.iter().filter(|t| **t == Task::A).count();
        let n_b = labels.len() - n_a;
        if n_a == 0 || n_b == 0 {
            return Err(Error::input(format!(
                "both task groups must be nonempty (N_A = {n_a}, N_B = {n_b})"
            )));
        }
        Ok(Self { labels, n_a, n_b })
    }

    /// First `n_a` samples in A, the remaining `n_b` in B.
    pub fn split(n_a: usize, n_b: usize) -> Result<Self> {
        let mut labels = vec![Task::A; n_a];
        labels.resize(n_a + n_b, Task::B);
        Self::new(labels)
    }

    pub fn labels(&self) -> &[Task] {
        &self.labels
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    pub fn n_b(&self) -> usize {
        self.n_b
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices(&self, task: Task) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == task).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct CouplingReport {
    pub k_bar_AA: f64,
    pub k_bar_AB: f64,
    pub k_bar_BB: f64,
    pub r_b: f64,
    /// `|N_A² k̄_AA + 2 N_A N_B k̄_AB + N_B² k̄_BB − Z| / Z`
    pub decomposition_residual: f64,
}

/// Mean within- and cross-group kernel similarities (diagonals included)
/// and the coupling ratio `R_B = 2 (N_A/N_B) (k̄_AB / k̄_BB)`.
pub fn coupling_ratio(errors: &ErrorSet, partition: &TaskPartition, sigma: f64) -> Result<CouplingReport> {
    if partition.len() != errors.len() {
        return Err(Error::input(format!(
            "partition labels {} samples but the error set has {}",
            partition.len(),
            errors.len()
        )));
    }
    let geo = Geometry::new(errors, sigma)?;
    let labels = partition.labels();
    let (mut s_aa, mut s_ab, mut s_bb) = (0.0, 0.0, 0.0);
    for i in 0..errors.len() {
        for j in i + 1..errors.len() {
            let k = geo.kernel(i, j);
            match (labels[i], labels[j]) {
                (Task::A, Task::A) => s_aa += k,
                (Task::B, Task::B) => s_bb += k,
                _ => s_ab += k,
            }
        }
    }
    let n_a = partition.n_a() as f64;
    let n_b = partition.n_b() as f64;
    let k_bar_aa = (n_a + 2.0 * s_aa) / (n_a * n_a);
    let k_bar_bb = (n_b + 2.0 * s_bb) / (n_b * n_b);
    let k_bar_ab = s_ab / (n_a * n_b);
    let z = information_potential(errors, sigma)?;
    let rebuilt = n_a * n_a * k_bar_aa + 2.0 * n_a * n_b * k_bar_ab + n_b * n_b * k_bar_bb;
    Ok(CouplingReport {
        k_bar_AA: k_bar_aa,
        k_bar_AB: k_bar_ab,
        k_bar_BB: k_bar_bb,
        r_b: 2.0 * (n_a / n_b) * (k_bar_ab / k_bar_bb),
        decomposition_residual: (rebuilt - z).abs() / z,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection {
    /// N × components, row-major.
    pub coords: Vec<Vec<f64>>,
    pub explained: Vec<f64>,
    /// Unit principal axes, one per component.
    pub axes: Vec<Vec<f64>>,
}

/// Projects mean-centred errors onto the leading eigenvectors of their
/// covariance. Each axis has its largest-magnitude entry made positive.
pub fn pca_project(errors: &ErrorSet, components: usize) -> Result<PcaProjection> {
    let n = errors.len();
    let dim = errors.dim();
    if components == 0 || components > dim {
        return Err(Error::config(format!(
            "pca components must be in [1, {dim}] for {dim}-dimensional errors, got {components}"
        )));
    }
    if n < 2 {
        return Err(Error::config("pca needs at least two samples"));
    }
    let mean = column_means(errors);
    let centred = DMatrix::from_fn(n, dim, |i, d| errors.sample(i)[d] - mean[d]);
    let cov = centred.transpose() * &centred / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut axes = Vec::with_capacity(components);
    let mut explained = Vec::with_capacity(components);
    for &c in order.iter().take(components) {
        let mut axis: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let pivot = axis
            .iter()
            .copied()
            .fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            axis.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(axis);
        explained.push(if total > 0.0 {
            eig.eigenvalues[c].max(0.0) / total
        } else {
            0.0
        });
    }
    let coords = (0..n)
        .map(|i| {
            axes.iter()
                .map(|axis| (0..dim).map(|d| centred[(i, d)] * axis[d]).sum())
                .collect()
        })
        .collect();
    Ok(PcaProjection {
        coords,
        explained,
        axes,
    })
}

/// Rényi entropy of each snapshot, sorted by step.
pub fn entropy_curve(history: &[(usize, ErrorSet)], sigma: f64) -> Result<Vec<(usize, f64)>> {
    if history.is_empty() {
        return Err(Error::input("entropy curve needs at least one snapshot"));
    }
    let mut curve = history
        .iter()
        .map(|(step, set)| Ok((*step, renyi_entropy_estimate(set, sigma)?)))
        .collect::<Result<Vec<_>>>()?;
    curve.sort_by_key(|(step, _)| *step);
    Ok(curve)
}
