//! Pairwise Gaussian kernels over action-error samples and the information
//! potential `Z = Σ_i Σ_j k_ij` shared by every loss and analysis.
//!
//! Samples are stored row-major in a flat buffer. Squared distances are
//! computed from explicit differences for small dimensions and from the Gram
//! factorization `‖a‖² + ‖b‖² − 2·a·b` once the dimension reaches
//! [`GRAM_MIN_DIM`]; either way they are clamped at zero before
//! exponentiation.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};

/// Dimension at which squared distances switch to the Gram factorization.
pub const GRAM_MIN_DIM: usize = 32;

/// Rows per block in the parallel reduction. Fixed so that the blocked sum
/// does not depend on the thread count.
const ROW_BLOCK: usize = 64;

/// Position of an error sample inside a batch: trajectory, timestep, chunk step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleIndex {
    pub b: usize,
    pub t: usize,
    pub k: usize,
}

/// Summation strategy for O(N²) reductions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Single-threaded, fixed row-major order over the upper triangle.
    #[default]
    Deterministic,
    /// Row blocks evaluated on the rayon pool, partial sums combined in block order.
    Parallel,
}

/// A non-empty set of `N` error vectors in `R^D`.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorSet {
    data: Vec<f64>,
    dim: usize,
    provenance: Option<Vec<SampleIndex>>,
}

impl ErrorSet {
    /// Builds a set from one vector per sample.
    pub fn new(samples: Vec<Vec<f64>>) -> Result<Self> {
        let dim = samples
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::input("error set must contain at least one sample"))?;
        let mut data = Vec::with_capacity(samples.len() * dim);
        for (i, s) in samples.iter().enumerate() {
            if s.len() != dim {
                return Err(Error::input(format!(
                    "sample {i} has dimension {} but sample 0 has dimension {dim}",
                    s.len()
                )));
            }
            data.extend_from_slice(s);
        }
        Self::from_flat(data, dim)
    }

    /// Builds a set from a row-major `N × dim` buffer.
    pub fn from_flat(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("sample dimension must be at least 1"));
        }
        if data.is_empty() {
            return Err(Error::input("error set must contain at least one sample"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::input(format!(
                "buffer of length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!(
                "non-finite value at sample {}, coordinate {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            data,
            dim,
            provenance: None,
        })
    }

    /// Attaches a `(b, t, k)` index to every sample. Indices must be unique.
    pub fn with_provenance(mut self, provenance: Vec<SampleIndex>) -> Result<Self> {
        if provenance.len() != self.len() {
            return Err(Error::input(format!(
                "provenance has {} entries for {} samples",
                provenance.len(),
                self.len()
            )));
        }
        let mut sorted = provenance.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::input(format!("duplicate provenance index {:?}", w[0])));
        }
        self.provenance = Some(provenance);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    /// Always false; kept for clippy's `len_without_is_empty`.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn samples(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn provenance(&self) -> Option<&[SampleIndex]> {
        self.provenance.as_deref()
    }

    /// Returns `e_i + offset` for every sample.
    pub fn translated(&self, offset: &[f64]) -> Result<Self> {
        if offset.len() != self.dim {
            return Err(Error::input(format!(
                "offset has dimension {} but samples have dimension {}",
                offset.len(),
                self.dim
            )));
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.dim) {
            row.iter_mut().zip(offset).for_each(|(x, c)| *x += c);
        }
        Ok(out)
    }

    /// Returns `factor · e_i` for every sample.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|x| *x *= factor);
        out
    }

    /// Subset of samples in the given order, provenance carried along.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::input("selection must not be empty"));
        }
        let n = self.len();
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= n {
                return Err(Error::input(format!("sample index {i} out of range for {n} samples")));
            }
            data.extend_from_slice(self.sample(i));
        }
        let provenance = self
            .provenance
            .as_ref()
            .map(|p| indices.iter().map(|&i| p[i]).collect());
        Ok(Self {
            data,
            dim: self.dim,
            provenance,
        })
    }

    /// Writes `b,t,k,e_0..e_{D-1}` rows with a header. Samples without
    /// provenance leave the index columns empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["b".to_string(), "t".to_string(), "k".to_string()];
        header.extend((0..self.dim).map(|d| format!("e_{d}")));
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(self.dim + 3);
        for (i, s) in self.samples().enumerate() {
            record.clear();
            match self.provenance.as_ref().map(|p| p[i]) {
                Some(ix) => {
                    record.push(ix.b.to_string());
                    record.push(ix.t.to_string());
                    record.push(ix.k.to_string());
                }
                None => record.extend(std::iter::repeat_n(String::new(), 3)),
            }
            record.extend(s.iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.len() < 4 || &header[0] != "b" || &header[1] != "t" || &header[2] != "k" {
            return Err(Error::input("error-set CSV header must be b,t,k,e_0,..."));
        }
        for (d, name) in header.iter().skip(3).enumerate() {
            if name != format!("e_{d}") {
                return Err(Error::input(format!("unexpected column {name:?}, expected e_{d}")));
            }
        }
        let dim = header.len() - 3;
        let mut data = Vec::new();
        let mut provenance = Vec::new();
        let mut missing = 0usize;
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let idx: Vec<&str> = (0..3).map(|c| rec[c].trim()).collect();
            if idx.iter().all(|s| s.is_empty()) {
                missing += 1;
            } else {
                let parse = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| Error::input(format!("row {row}: bad index {s:?}")))
                };
                provenance.push(SampleIndex {
                    b: parse(idx[0])?,
                    t: parse(idx[1])?,
                    k: parse(idx[2])?,
                });
            }
            for c in 3..rec.len() {
                let v = rec[c]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::input(format!("row {row}: bad value {:?}", &rec[c])))?;
                data.push(v);
            }
        }
        if missing > 0 && !provenance.is_empty() {
            return Err(Error::input("provenance columns must be filled on all rows or none"));
        }
        let set = Self::from_flat(data, dim)?;
        if provenance.is_empty() {
            Ok(set)
        } else {
            set.with_provenance(provenance)
        }
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

/// Flattens a `B × T × K` array of `D`-vectors in `(b, t, k)` row-major order,
/// recording each sample's provenance.
pub fn flatten_batch(batch: &[Vec<Vec<Vec<f64>>>]) -> Result<ErrorSet> {
    let t_len = batch.first().map(Vec::len).unwrap_or(0);
    let k_len = batch.first().and_then(|b| b.first()).map(Vec::len).unwrap_or(0);
    let dim = batch
        .first()
        .and_then(|b| b.first())
        .and_then(|t| t.first())
        .map(Vec::len)
        .unwrap_or(0);
    if t_len == 0 || k_len == 0 || dim == 0 {
        return Err(Error::input("batch must have B, T, K, D all at least 1"));
    }
    let mut data = Vec::with_capacity(batch.len() * t_len * k_len * dim);
    let mut provenance = Vec::with_capacity(batch.len() * t_len * k_len);
    for (b, traj) in batch.iter().enumerate() {
        if traj.len() != t_len {
            return Err(Error::input(format!(
                "trajectory {b} has {} timesteps, expected {t_len}",
                traj.len()
            )));
        }
        for (t, chunk) in traj.iter().enumerate() {
            if chunk.len() != k_len {
                return Err(Error::input(format!(
                    "trajectory {b} timestep {t} has chunk size {}, expected {k_len}",
                    chunk.len()
                )));
            }
            for (k, e) in chunk.iter().enumerate() {
                if e.len() != dim {
                    return Err(Error::input(format!(
                        "sample ({b},{t},{k}) has dimension {}, expected {dim}",
                        e.len()
                    )));
                }
                data.extend_from_slice(e);
                provenance.push(SampleIndex { b, t, k });
            }
        }
    }
    ErrorSet::from_flat(data, dim)?.with_provenance(provenance)
}

/// Squared-distance evaluator shared by the kernel, loss and gradient code.
pub(crate) struct Geometry<'a> {
    set: &'a ErrorSet,
    norms: Option<Vec<f64>>,
    inv_two_sigma_sq: f64,
}

impl<'a> Geometry<'a> {
    pub(crate) fn new(set: &'a ErrorSet, sigma: f64) -> Result<Self> {
        ensure_positive("sigma", sigma)?;
        let norms = (set.dim() >= GRAM_MIN_DIM).then(|| set.samples().map(|s| s.iter().map(|x| x * x).sum()).collect());
        Ok(Self {
            set,
            norms,
            inv_two_sigma_sq: 1.0 / (2.0 * sigma * sigma),
        })
    }

    #[inline]
    pub(crate) fn sq_dist(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.set.sample(i), self.set.sample(j));
        match &self.norms {
            None => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
            Some(n) => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                (n[i] + n[j] - 2.0 * dot).max(0.0)
            }
        }
    }

    #[inline]
    pub(crate) fn kernel(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 1.0;
        }
        (-self.sq_dist(i, j) * self.inv_two_sigma_sq).exp()
    }

    /// `Σ_{j>i} k_ij`, accumulated in increasing `j`.
    fn upper_row_sum(&self, i: usize) -> f64 {
        (i + 1..self.set.len()).map(|j| self.kernel(i, j)).sum()
    }
}

/// Dense symmetric `N × N` Gaussian kernel matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    n: usize,
    sigma: f64,
    entries: Vec<f64>,
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    /// `Z`, summed in the same order as [`information_potential`] so the two
    /// agree bit for bit.
    pub fn potential(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            let row: f64 = self.row(i)[i + 1..].iter().sum();
            acc += row;
        }
        self.n as f64 + 2.0 * acc
    }

    /// Row sums `r_i = Σ_j k_ij`.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).iter().sum()).collect()
    }
}

/// `k_ij = exp(−‖e_i − e_j‖² / 2σ²)` for every pair, diagonal included.
pub fn pairwise_kernel(errors: &ErrorSet, sigma: f64) -> Result<KernelMatrix> {
    pairwise_kernel_with(errors, sigma, Reduction::Deterministic)
}

pub fn pairwise_kernel_with(errors: &ErrorSet, sigma: f64, mode: Reduction) -> Result<KernelMatrix> {
    let geo = Geometry::new(errors, sigma)?;
    let n = errors.len();
    let mut entries = vec![0.0; n * n];
    let fill_row = |i: usize, row: &mut [f64]| {
        row[i] = 1.0;
        for (j, slot) in row.iter_mut().enumerate().skip(i + 1) {
            *slot = geo.kernel(i, j);
        }
    };
    match mode {
        Reduction::Deterministic => {
            for (i, row) in entries.chunks_exact_mut(n).enumerate() {
                fill_row(i, row);
            }
        }
        Reduction::Parallel => {
            entries
                .par_chunks_exact_mut(n)
                .enumerate()
                .for_each(|(i, row)| fill_row(i, row));
        }
    }
    // Mirror the upper triangle so the matrix is exactly symmetric.
    for i in 0..n {
        for j in 0..i {
            entries[i * n + j] = entries[j * n + i];
        }
    }
    Ok(KernelMatrix { n, sigma, entries })
}

/// Information potential `Z = Σ_i Σ_j k_ij`, with `N ≤ Z ≤ N²`.
pub fn information_potential(errors: &ErrorSet, sigma: f64) -> Result<f64> {
    information_potential_with(errors, sigma, Reduction::Deterministic)
}

pub fn information_potential_with(errors: &ErrorSet, sigma: f64, mode: Reduction) -> Result<f64> {
    let geo = Geometry::new(errors, sigma)?;
    let n = errors.len();
    let off_diagonal = match mode {
        Reduction::Deterministic => {
            let mut acc = 0.0;
            for i in 0..n {
                acc += geo.upper_row_sum(i);
            }
            acc
        }
        Reduction::Parallel => {
            let starts: Vec<usize> = (0..n).step_by(ROW_BLOCK).collect();
            let partials: Vec<f64> = starts
                .par_iter()
                .map(|&start| {
                    (start..(start + ROW_BLOCK).min(n))
                        .map(|i| geo.upper_row_sum(i))
                        .sum::<f64>()
                })
                .collect();
            partials.iter().sum()
        }
    };
    Ok(n as f64 + 2.0 * off_diagonal)
}
