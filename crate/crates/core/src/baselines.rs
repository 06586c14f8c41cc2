//! Per-step score functions sharing the cumulative-sum pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conformal::EmbeddingStats;
use crate::error::{check_dim, invalid, Error, Result};
use crate::policy::{reconstruct, PolicyOracle};
use crate::rollout::{InferenceRecord, RolloutLog};
use crate::stac::{DistanceKind, ScoreSeries, StacConfig};

pub const DEFAULT_NOISE_DRAWS: usize = 10;
pub const DEFAULT_DEPTHS: [usize; 4] = [5, 10, 25, 50];

/// A per-inference-step score; cumulative sums of it are thresholded.
pub trait ScoreFunction: Sync {
    fn name(&self) -> &str;
    /// Score at record `j` of `log`; must be finite and nonnegative.
    fn step_score(&self, log: &RolloutLog, j: usize) -> Result<f64>;
}

/// Scores every record and accumulates. All detectors go through here.
pub fn score_series(f: &dyn ScoreFunction, log: &RolloutLog) -> Result<ScoreSeries> {
    let scores = (0..log.records.len()).map(|j| f.step_score(log, j)).collect::<Result<Vec<_>>>()?;
    ScoreSeries::from_step_scores(log.records.iter().map(|r| r.timestep).collect(), scores)
}

impl ScoreFunction for StacConfig {
    fn name(&self) -> &str {
        match self.distance {
            DistanceKind::Mmd => DetectorKind::StacMmd.name(),
            DistanceKind::KlForward => DetectorKind::StacKlf.name(),
            DistanceKind::KlReverse => DetectorKind::StacKlr.name(),
            DistanceKind::MinL2 => DetectorKind::MinL2.name(),
        }
    }

    fn step_score(&self, log: &RolloutLog, j: usize) -> Result<f64> {
        if j == 0 {
            return Ok(0.0);
        }
        StacConfig::step_score(self, &log.records[j - 1], &log.records[j], &log.header)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DetectorKind {
    #[serde(rename = "stac-mmd")]
    StacMmd,
    #[serde(rename = "stac-klf")]
    StacKlf,
    #[serde(rename = "stac-klr")]
    StacKlr,
    #[serde(rename = "min-l2")]
    MinL2,
    #[serde(rename = "mahalanobis")]
    Mahalanobis,
    #[serde(rename = "ddpm")]
    Ddpm,
    #[serde(rename = "ddpm-temporal")]
    DdpmTemporal,
    #[serde(rename = "recon")]
    Recon,
    #[serde(rename = "recon-temporal")]
    ReconTemporal,
    #[serde(rename = "outvar")]
    OutVar,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 10] = [
        Self::StacMmd,
        Self::StacKlf,
        Self::StacKlr,
        Self::MinL2,
        Self::Mahalanobis,
        Self::Ddpm,
        Self::DdpmTemporal,
        Self::Recon,
        Self::ReconTemporal,
        Self::OutVar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::StacMmd => "stac-mmd",
            Self::StacKlf => "stac-klf",
            Self::StacKlr => "stac-klr",
            Self::MinL2 => "min-l2",
            Self::Mahalanobis => "mahalanobis",
            Self::Ddpm => "ddpm",
            Self::DdpmTemporal => "ddpm-temporal",
            Self::Recon => "recon",
            Self::ReconTemporal => "recon-temporal",
            Self::OutVar => "outvar",
        }
    }

    pub fn needs_oracle(self) -> bool {
        matches!(self, Self::Ddpm | Self::DdpmTemporal | Self::Recon | Self::ReconTemporal)
    }

    pub fn needs_embeddings(self) -> bool {
        self == Self::Mahalanobis
    }

    pub fn stac_distance(self) -> Option<DistanceKind> {
        match self {
            Self::StacMmd => Some(DistanceKind::Mmd),
            Self::StacKlf => Some(DistanceKind::KlForward),
            Self::StacKlr => Some(DistanceKind::KlReverse),
            Self::MinL2 => Some(DistanceKind::MinL2),
            _ => None,
        }
    }
}

impl std::fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|d| d.name() == s).ok_or_else(|| Error::UnknownDetector(s.into()))
    }
}

/// Inputs a detector may need beyond the log itself.
#[derive(Clone, Copy, Default)]
pub struct DetectorContext<'a> {
    pub oracle: Option<&'a (dyn PolicyOracle + Sync)>,
    pub embedding_stats: Option<&'a EmbeddingStats>,
    pub seed: u64,
}

pub fn build_detector<'a>(kind: DetectorKind, ctx: DetectorContext<'a>) -> Result<Box<dyn ScoreFunction + 'a>> {
    if let Some(distance) = kind.stac_distance() {
        return Ok(Box::new(StacConfig::new(distance)));
    }
    let oracle = || ctx.oracle.ok_or_else(|| Error::MissingOracle(kind.name().into()));
    Ok(match kind {
        DetectorKind::Mahalanobis => Box::new(Mahalanobis {
            stats: ctx
                .embedding_stats
                .ok_or_else(|| invalid("mahalanobis needs embedding statistics from calibration"))?
                .clone(),
        }),
        DetectorKind::Ddpm | DetectorKind::DdpmTemporal => Box::new(DdpmLoss {
            oracle: oracle()?,
            n_noise_draws: DEFAULT_NOISE_DRAWS,
            seed: ctx.seed,
            temporal: kind == DetectorKind::DdpmTemporal,
        }),
        DetectorKind::Recon | DetectorKind::ReconTemporal => Box::new(Reconstruction {
            oracle: oracle()?,
            depths: DEFAULT_DEPTHS.to_vec(),
            seed: ctx.seed,
            temporal: kind == DetectorKind::ReconTemporal,
        }),
        DetectorKind::OutVar => Box::new(OutputVariance),
        _ => unreachable!("stac variants handled above"),
    })
}

pub fn mahalanobis_score(z: &[f64], stats: &EmbeddingStats) -> Result<f64> {
    check_dim(stats.dim(), z.len())?;
    let d = stats.dim();
    let c: Vec<f64> = z.iter().zip(&stats.mean).map(|(a, m)| a - m).collect();
    let mut q = 0.0;
    for i in 0..d {
        let row = &stats.covariance_inverse[i * d..(i + 1) * d];
        q += c[i] * row.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(q.max(0.0).sqrt())
}

fn record_rng(seed: u64, timestep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(timestep as u64);
    rng
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn check_oracle_shape(oracle: &dyn PolicyOracle, record: &InferenceRecord) -> Result<()> {
    let (h, d) = oracle.chunk_shape();
    check_dim(h, record.chunk_samples.horizon())?;
    check_dim(d, record.chunk_samples.action_dim())
}

/// Mean of `||eps - eps_hat||^2` over chunks and `n_noise_draws` draws of
/// `(i, eps)`: `i` once per draw, `eps` per chunk.
fn ddpm_loss(chunks: &[Vec<f64>], state: &[f64], oracle: &dyn PolicyOracle, n_noise_draws: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    if n_noise_draws == 0 {
        return Err(invalid("n_noise_draws must be at least 1"));
    }
    let n_steps = oracle.schedule().n_steps();
    let mut total = 0.0;
    for _ in 0..n_noise_draws {
        let i = rng.random_range(0..n_steps);
        for a0 in chunks {
            let eps = normal_vec(rng, a0.len());
            let x = oracle.schedule().noise(a0, &eps, i)?;
            total += sq_dist(&eps, &oracle.eps(&x, state, i)?);
        }
    }
    Ok(total / (n_noise_draws * chunks.len()) as f64)
}

/// Mean of `||a0 - reconstruct(noise(a0, i))||^2` over chunks and depths.
fn reconstruction_loss(chunks: &[Vec<f64>], state: &[f64], oracle: &dyn PolicyOracle, depths: &[usize], rng: &mut ChaCha8Rng) -> Result<f64> {
    let n_steps = oracle.schedule().n_steps();
    if depths.is_empty() || depths.iter().any(|&i| i == 0 || i >= n_steps) {
        return Err(invalid(format!("reconstruction depths must be nonempty and lie in [1, {n_steps})")));
    }
    let mut total = 0.0;
    for a0 in chunks {
        for &i in depths {
            let eps = normal_vec(rng, a0.len());
            let x = oracle.schedule().noise(a0, &eps, i)?;
            total += sq_dist(a0, &reconstruct(oracle, &x, state, i)?);
        }
    }
    Ok(total / (depths.len() * chunks.len()) as f64)
}

fn record_chunks(record: &InferenceRecord) -> Vec<Vec<f64>> {
    record.chunk_samples.chunks().map(<[f64]>::to_vec).collect()
}

/// Executed prefix of `prev` (first `k` steps) followed by the first `h - k`
/// steps of every chunk in `curr`.
pub fn temporal_chunks(prev: &InferenceRecord, curr: &InferenceRecord, k: usize) -> Result<Vec<Vec<f64>>> {
    let (pc, cc) = (&prev.chunk_samples, &curr.chunk_samples);
    check_dim(pc.horizon(), cc.horizon())?;
    check_dim(pc.action_dim(), cc.action_dim())?;
    if curr.timestep != prev.timestep + k {
        return Err(invalid(format!("records at t={} and t={} are not adjacent", prev.timestep, curr.timestep)));
    }
    let (h, d) = (pc.horizon(), pc.action_dim());
    if k == 0 || k >= h {
        return Err(invalid("execution horizon must lie in (0, h)"));
    }
    let prefix = &prev.executed_chunk()[..k * d];
    Ok(cc
        .chunks()
        .map(|c| {
            let mut v = prefix.to_vec();
            v.extend_from_slice(&c[..(h - k) * d]);
            v
        })
        .collect())
}

pub fn ddpm_loss_score(record: &InferenceRecord, state: &[f64], oracle: &dyn PolicyOracle, n_noise_draws: usize, seed: u64) -> Result<f64> {
    check_oracle_shape(oracle, record)?;
    ddpm_loss(&record_chunks(record), state, oracle, n_noise_draws, &mut record_rng(seed, record.timestep))
}

pub fn temporal_ddpm_loss_score(
    prev: &InferenceRecord,
    curr: &InferenceRecord,
    prev_state: &[f64],
    k: usize,
    oracle: &dyn PolicyOracle,
    n_noise_draws: usize,
    seed: u64,
) -> Result<f64> {
    check_oracle_shape(oracle, curr)?;
    let chunks = temporal_chunks(prev, curr, k)?;
    ddpm_loss(&chunks, prev_state, oracle, n_noise_draws, &mut record_rng(seed, curr.timestep))
}

pub fn reconstruction_score(record: &InferenceRecord, state: &[f64], oracle: &dyn PolicyOracle, depths: &[usize], seed: u64) -> Result<f64> {
    check_oracle_shape(oracle, record)?;
    reconstruction_loss(&record_chunks(record), state, oracle, depths, &mut record_rng(seed, record.timestep))
}

pub fn temporal_reconstruction_score(
    prev: &InferenceRecord,
    curr: &InferenceRecord,
    prev_state: &[f64],
    k: usize,
    oracle: &dyn PolicyOracle,
    depths: &[usize],
    seed: u64,
) -> Result<f64> {
    check_oracle_shape(oracle, curr)?;
    let chunks = temporal_chunks(prev, curr, k)?;
    reconstruction_loss(&chunks, prev_state, oracle, depths, &mut record_rng(seed, curr.timestep))
}

/// Mean over masked flattened dimensions of the per-dimension variance
/// across the batch (`n` denominator).
pub fn output_variance_score(record: &InferenceRecord, mask: &[bool]) -> Result<f64> {
    let chunks = &record.chunk_samples;
    if chunks.batch() < 2 {
        return Err(invalid("output variance needs at least two sampled chunks"));
    }
    check_dim(chunks.action_dim(), mask.len())?;
    let rows: Vec<Vec<f64>> = (0..chunks.batch()).map(|b| chunks.flatten_window(b, 0..chunks.horizon(), mask)).collect();
    let dims = rows[0].len();
    if dims == 0 {
        return Err(invalid("mask selects no dimensions"));
    }
    let n = rows.len() as f64;
    let mut total = 0.0;
    for j in 0..dims {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        total += rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
    }
    Ok(total / dims as f64)
}

fn state_of(record: &InferenceRecord) -> Result<&[f64]> {
    record
        .embedding
        .as_deref()
        .ok_or_else(|| invalid(format!("record at t={} has no state embedding", record.timestep)))
}

struct Mahalanobis {
    stats: EmbeddingStats,
}

impl ScoreFunction for Mahalanobis {
    fn name(&self) -> &str {
        DetectorKind::Mahalanobis.name()
    }

    fn step_score(&self, log: &RolloutLog, j: usize) -> Result<f64> {
        mahalanobis_score(state_of(&log.records[j])?, &self.stats)
    }
}

struct DdpmLoss<'a> {
    oracle: &'a (dyn PolicyOracle + Sync),
    n_noise_draws: usize,
    seed: u64,
    temporal: bool,
}

impl ScoreFunction for DdpmLoss<'_> {
    fn name(&self) -> &str {
        if self.temporal { DetectorKind::DdpmTemporal.name() } else { DetectorKind::Ddpm.name() }
    }

    fn step_score(&self, log: &RolloutLog, j: usize) -> Result<f64> {
        let r = &log.records;
        if !self.temporal {
            return ddpm_loss_score(&r[j], state_of(&r[j])?, self.oracle, self.n_noise_draws, self.seed);
        }
        if j == 0 {
            return Ok(0.0);
        }
        let k = log.header.execution_horizon;
        temporal_ddpm_loss_score(&r[j - 1], &r[j], state_of(&r[j - 1])?, k, self.oracle, self.n_noise_draws, self.seed)
    }
}

struct Reconstruction<'a> {
    oracle: &'a (dyn PolicyOracle + Sync),
    depths: Vec<usize>,
    seed: u64,
    temporal: bool,
}

impl ScoreFunction for Reconstruction<'_> {
    fn name(&self) -> &str {
        if self.temporal { DetectorKind::ReconTemporal.name() } else { DetectorKind::Recon.name() }
    }

    fn step_score(&self, log: &RolloutLog, j: usize) -> Result<f64> {
        let r = &log.records;
        if !self.temporal {
            return reconstruction_score(&r[j], state_of(&r[j])?, self.oracle, &self.depths, self.seed);
        }
        if j == 0 {
            return Ok(0.0);
        }
        let k = log.header.execution_horizon;
        temporal_reconstruction_score(&r[j - 1], &r[j], state_of(&r[j - 1])?, k, self.oracle, &self.depths, self.seed)
    }
}

struct OutputVariance;

impl ScoreFunction for OutputVariance {
    fn name(&self) -> &str {
        DetectorKind::OutVar.name()
    }

    fn step_score(&self, log: &RolloutLog, j: usize) -> Result<f64> {
        output_variance_score(&log.records[j], &log.header.action_mask)
    }
}
