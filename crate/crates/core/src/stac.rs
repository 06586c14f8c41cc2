//! Statistical temporal action consistency.
//!
//! Consecutive inference steps `t` and `t + k` both predict the actions for
//! `t + k .. t + h - 1`. The detector compares the two sampled distributions
//! of those overlapping actions and sums the distances along the rollout:
//!
//! ```text
//! eta_{jk} = sum_{i < j} D(prev marginal at ik, curr marginal at (i+1)k)
//! ```
//!
//! Every distance is nonnegative, so `eta` never decreases and a rollout
//! crosses the threshold at some step iff its terminal score does.

use serde::{Deserialize, Serialize};

use crate::distance::{self, BandwidthConfig, SampleSet};
use crate::error::{invalid, invariant, Result};
use crate::rollout::{InferenceRecord, RolloutHeader, RolloutLog};

/// Flattened overlapping action sequences from two adjacent inference steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapPair {
    /// Chunk indices `k..h` of every sample drawn at the earlier step.
    pub prev: SampleSet,
    /// Chunk indices `0..h-k` of every sample drawn at the later step.
    pub curr: SampleSet,
    /// Absolute timestep of the later step.
    pub at_timestep: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Mmd,
    KlForward,
    KlReverse,
    MinL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StacConfig {
    pub distance: DistanceKind,
    #[serde(default)]
    pub bandwidths: BandwidthConfig,
}

impl StacConfig {
    pub fn new(distance: DistanceKind) -> Self {
        Self { distance, bandwidths: BandwidthConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.bandwidths.validate()
    }

    /// Distance between the overlapping marginals of two adjacent records.
    pub fn step_score(&self, prev: &InferenceRecord, curr: &InferenceRecord, header: &RolloutHeader) -> Result<f64> {
        let pair = extract_overlap(prev, curr, header)?;
        let bw = &self.bandwidths;
        match self.distance {
            DistanceKind::Mmd => {
                let beta = bw.resolve_mmd(&pair.prev, &pair.curr, header.masked_dim())?;
                distance::mmd_rbf(&pair.prev, &pair.curr, beta)
            }
            DistanceKind::KlForward => {
                let beta = bw.resolve_kde(&pair.prev, &pair.curr)?;
                distance::kl_forward(&pair.prev, &pair.curr, beta)
            }
            DistanceKind::KlReverse => {
                let beta = bw.resolve_kde(&pair.prev, &pair.curr)?;
                distance::kl_reverse(&pair.prev, &pair.curr, beta)
            }
            DistanceKind::MinL2 => {
                let (h, k) = (header.prediction_horizon, header.execution_horizon);
                let executed = prev
                    .chunk_samples
                    .flatten_window(prev.executed_index, k..h, &header.action_mask);
                distance::min_l2(&executed, &pair.curr)
            }
        }
    }
}

/// Per-step scores and their running sum for one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub timesteps: Vec<usize>,
    pub step_scores: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl ScoreSeries {
    /// Accumulates per-step scores; every score must be finite and nonnegative.
    pub fn from_step_scores(timesteps: Vec<usize>, step_scores: Vec<f64>) -> Result<Self> {
        if timesteps.len() != step_scores.len() {
            return Err(invalid("timesteps and scores differ in length"));
        }
        if let Some(bad) = step_scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(invariant(format!("step score {bad} is not a finite nonnegative value")));
        }
        let cumulative = step_scores
            .iter()
            .scan(0.0, |acc, s| {
                *acc += s;
                Some(*acc)
            })
            .collect();
        Ok(Self { timesteps, step_scores, cumulative })
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// Cumulative score at the last inference step (zero for an empty series).
    pub fn terminal(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// CSV with header `timestep,step_score,cumulative`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("timestep,step_score,cumulative\n");
        for ((t, s), c) in self.timesteps.iter().zip(&self.step_scores).zip(&self.cumulative) {
            out.push_str(&format!("{t},{s},{c}\n"));
        }
        out
    }
}

/// Slices the temporally overlapping actions of two adjacent records.
pub fn extract_overlap(prev: &InferenceRecord, curr: &InferenceRecord, header: &RolloutHeader) -> Result<OverlapPair> {
    let (h, k) = (header.prediction_horizon, header.execution_horizon);
    if curr.timestep != prev.timestep + k {
        return Err(invalid(format!(
            "records at t={} and t={} are not adjacent (k={k})",
            prev.timestep, curr.timestep
        )));
    }
    let mask = &header.action_mask;
    let side = |record: &InferenceRecord, steps: std::ops::Range<usize>| -> Result<SampleSet> {
        let chunks = &record.chunk_samples;
        if chunks.horizon() != h || chunks.action_dim() != header.action_dim {
            return Err(invalid(format!(
                "record at t={} does not match header chunk shape",
                record.timestep
            )));
        }
        let mut data = Vec::with_capacity(chunks.batch() * steps.len() * header.masked_dim());
        for b in 0..chunks.batch() {
            data.extend(chunks.flatten_window(b, steps.clone(), mask));
        }
        SampleSet::from_flat(steps.len() * header.masked_dim(), data)
    };
    Ok(OverlapPair {
        prev: side(prev, k..h)?,
        curr: side(curr, 0..h - k)?,
        at_timestep: curr.timestep,
    })
}

/// Scores a rollout: zero at the first inference step, then the distance
/// between each pair of adjacent steps.
pub fn score_rollout(log: &RolloutLog, config: &StacConfig) -> Result<ScoreSeries> {
    config.validate()?;
    if log.records.len() < 2 {
        return Err(invalid("STAC scoring needs at least two inference records"));
    }
    crate::baselines::score_series(config, log)
}

/// First timestep whose cumulative score strictly exceeds `gamma`.
pub fn detect_online(series: &ScoreSeries, gamma: f64) -> Option<usize> {
    series
        .cumulative
        .iter()
        .position(|&eta| eta > gamma)
        .map(|j| series.timesteps[j])
}

/// Incremental form of the cumulative score for live use.
#[derive(Debug, Clone)]
pub struct OnlineMonitor {
    gamma: f64,
    eta: f64,
    fired_at: Option<usize>,
}

impl OnlineMonitor {
    pub fn new(gamma: f64) -> Self {
        Self { gamma, eta: 0.0, fired_at: None }
    }

    /// Adds one step score; returns `true` once the threshold has been crossed.
    pub fn push(&mut self, timestep: usize, step_score: f64) -> bool {
        self.eta += step_score;
        if self.fired_at.is_none() && self.eta > self.gamma {
            self.fired_at = Some(timestep);
        }
        self.fired_at.is_some()
    }

    pub fn score(&self) -> f64 {
        self.eta
    }

    pub fn fired_at(&self) -> Option<usize> {
        self.fired_at
    }
}
