//! Sample-based distances between two sets of flattened action sequences.
//!
//! The estimators compare the overlapping parts of action chunks sampled at
//! consecutive inference steps:
//!
//! - squared MMD with the RBF kernel `exp(-|a-b|^2 / beta)` (biased
//!   V-statistic, diagonal terms included, so it is never negative);
//! - forward and reverse KL divergence between Gaussian kernel density
//!   estimates, clamped at zero;
//! - the non-statistical minimum L2 distance from one executed sequence to a
//!   sampled batch.
//!
//! Bandwidth heuristics fall back to [`BANDWIDTH_FLOOR`] when every pooled
//! point coincides, so constant-output policies still score finitely.

use std::cmp::Ordering;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};

/// Bandwidth used when a data-driven bandwidth would be zero.
pub const BANDWIDTH_FLOOR: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `n` points of dimension `d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    dim: usize,
    data: Vec<f64>,
}

impl SampleSet {
    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("sample dimension must be at least 1"));
        }
        if data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(invalid(format!(
                "sample buffer of length {} does not hold whole points of dimension {dim}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(invalid("sample set contains non-finite values"));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            check_dim(dim, row.as_ref().len())?;
            data.extend_from_slice(row.as_ref());
        }
        Self::from_flat(dim, data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Total order used to make two-set estimators exactly symmetric.
    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.len().cmp(&other.len()).then_with(|| {
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdBandwidth {
    Fixed(f64),
    MedianHeuristic,
    /// `1 / d` for per-step action dimension `d` after masking.
    InverseActionDim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdeBandwidth {
    Fixed(f64),
    MaxEigCov,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthConfig {
    pub mmd_bandwidth: MmdBandwidth,
    pub kde_bandwidth: KdeBandwidth,
}

impl Default for BandwidthConfig {
    fn default() -> Self {
        Self {
            mmd_bandwidth: MmdBandwidth::MedianHeuristic,
            kde_bandwidth: KdeBandwidth::MaxEigCov,
        }
    }
}

impl BandwidthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if let MmdBandwidth::Fixed(b) = self.mmd_bandwidth {
            if !positive(b) {
                return Err(invalid(format!("fixed MMD bandwidth must be positive, got {b}")));
            }
        }
        if let KdeBandwidth::Fixed(b) = self.kde_bandwidth {
            if !positive(b) {
                return Err(invalid(format!("fixed KDE bandwidth must be positive, got {b}")));
            }
        }
        Ok(())
    }

    pub fn resolve_mmd(&self, x: &SampleSet, y: &SampleSet, action_dim: usize) -> Result<f64> {
        match self.mmd_bandwidth {
            MmdBandwidth::Fixed(b) => Ok(b),
            MmdBandwidth::MedianHeuristic => median_heuristic(x, y),
            MmdBandwidth::InverseActionDim => Ok(1.0 / action_dim.max(1) as f64),
        }
    }

    pub fn resolve_kde(&self, x: &SampleSet, y: &SampleSet) -> Result<f64> {
        match self.kde_bandwidth {
            KdeBandwidth::Fixed(b) => Ok(b),
            KdeBandwidth::MaxEigCov => kde_bandwidth_max_eig(x, y),
        }
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn pooled<'a>(x: &'a SampleSet, y: &'a SampleSet) -> Result<Vec<&'a [f64]>> {
    check_dim(x.dim(), y.dim())?;
    let points: Vec<&[f64]> = x.rows().chain(y.rows()).collect();
    if points.len() < 2 {
        return Err(invalid("bandwidth heuristics need at least two pooled points"));
    }
    Ok(points)
}

/// Median of squared pairwise distances over the pooled set.
pub fn median_heuristic(x: &SampleSet, y: &SampleSet) -> Result<f64> {
    let points = pooled(x, y)?;
    let mut dists = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            dists.push(sq_dist(a, b));
        }
    }
    let n = dists.len();
    let mid = n / 2;
    let (_, &mut upper, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let median = if n % 2 == 1 {
        upper
    } else {
        let lower = dists[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    Ok(if median > 0.0 { median } else { BANDWIDTH_FLOOR })
}

/// Square root of the largest eigenvalue of the pooled sample covariance
/// (`n - 1` denominator).
pub fn kde_bandwidth_max_eig(x: &SampleSet, y: &SampleSet) -> Result<f64> {
    let points = pooled(x, y)?;
    let n = points.len();
    let d = x.dim();
    let mut mean = vec![0.0; d];
    for p in &points {
        for (m, v) in mean.iter_mut().zip(p.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for p in &points {
        for i in 0..d {
            let di = p[i] - mean[i];
            for j in i..d {
                cov[(i, j)] += di * (p[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let lambda_max = if d == 1 {
        cov[(0, 0)]
    } else {
        SymmetricEigen::new(cov).eigenvalues.iter().copied().fold(0.0, f64::max)
    };
    let bw = lambda_max.max(0.0).sqrt();
    Ok(if bw > 0.0 { bw } else { BANDWIDTH_FLOOR })
}

fn check_bandwidth(bandwidth: f64) -> Result<()> {
    if bandwidth.is_finite() && bandwidth > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("bandwidth must be positive, got {bandwidth}")))
    }
}

fn self_kernel_sum(x: &SampleSet, bandwidth: f64) -> f64 {
    let n = x.len();
    let mut off_diag = 0.0;
    for i in 0..n {
        let a = x.row(i);
        for j in i + 1..n {
            off_diag += (-sq_dist(a, x.row(j)) / bandwidth).exp();
        }
    }
    n as f64 + 2.0 * off_diag
}

/// Biased squared MMD between `x` and `y` with kernel `exp(-|a-b|^2 / bandwidth)`.
pub fn mmd_rbf(x: &SampleSet, y: &SampleSet, bandwidth: f64) -> Result<f64> {
    check_dim(x.dim(), y.dim())?;
    check_bandwidth(bandwidth)?;
    let (a, b) = if x.canonical_cmp(y).is_gt() { (y, x) } else { (x, y) };
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let k_aa = self_kernel_sum(a, bandwidth) / (na * na);
    let k_bb = self_kernel_sum(b, bandwidth) / (nb * nb);
    let mut cross = 0.0;
    for p in a.rows() {
        for q in b.rows() {
            cross += (-sq_dist(p, q) / bandwidth).exp();
        }
    }
    let k_ab = cross / (na * nb);
    Ok((k_aa + k_bb - 2.0 * k_ab).max(0.0))
}

/// Log density of an equal-weight Gaussian mixture centred on `fit`, with
/// per-dimension standard deviation `bandwidth`, at every query point.
pub fn kde_log_density(fit: &SampleSet, queries: &SampleSet, bandwidth: f64) -> Result<Vec<f64>> {
    check_dim(fit.dim(), queries.dim())?;
    check_bandwidth(bandwidth)?;
    let d = fit.dim() as f64;
    let norm = -(fit.len() as f64).ln() - 0.5 * d * (LN_2PI + 2.0 * bandwidth.ln());
    let inv_two_var = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut exponents = vec![0.0; fit.len()];
    Ok(queries
        .rows()
        .map(|q| {
            for (e, f) in exponents.iter_mut().zip(fit.rows()) {
                *e = -sq_dist(q, f) * inv_two_var;
            }
            log_sum_exp(&exponents) + norm
        })
        .collect())
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean over `at` of `log p(a) - log q(a)`, where `p` is the KDE of `at`
/// itself and `q` the KDE of `other`; clamped at zero.
fn kde_kl(at: &SampleSet, other: &SampleSet, bandwidth: f64) -> Result<f64> {
    let log_p = kde_log_density(at, at, bandwidth)?;
    let log_q = kde_log_density(other, at, bandwidth)?;
    let mean = log_p.iter().zip(&log_q).map(|(p, q)| p - q).sum::<f64>() / at.len() as f64;
    Ok(mean.max(0.0))
}

/// Forward KL estimate: expectation under the current step's samples.
pub fn kl_forward(prev: &SampleSet, curr: &SampleSet, bandwidth: f64) -> Result<f64> {
    kde_kl(curr, prev, bandwidth)
}

/// Reverse KL estimate: expectation under the previous step's samples.
pub fn kl_reverse(prev: &SampleSet, curr: &SampleSet, bandwidth: f64) -> Result<f64> {
    kde_kl(prev, curr, bandwidth)
}

/// Distance from the executed overlap to the closest sampled sequence.
pub fn min_l2(executed_overlap: &[f64], curr: &SampleSet) -> Result<f64> {
    check_dim(curr.dim(), executed_overlap.len())?;
    if curr.is_empty() {
        return Err(invalid("min_l2 needs at least one candidate sequence"));
    }
    Ok(curr
        .rows()
        .map(|r| sq_dist(executed_overlap, r))
        .fold(f64::INFINITY, f64::min)
        .sqrt())
}
