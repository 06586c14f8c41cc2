//! Rollout logs: the per-inference-step record of sampled action chunks that
//! every detector consumes.
//!
//! A log is stored as newline-delimited JSON (`.sentinel.jsonl`):
//!
//! ```text
//! {"type":"header","format_version":1,"action_dim":3,...}
//! {"type":"record","timestep":0,"chunk_samples":[[[...]]],"executed_index":0}
//! {"type":"record","timestep":4,...}
//! {"type":"label","outcome":"success","return":1.0,"threshold":1.0}
//! ```
//!
//! Line 1 is the header, then one line per inference step, then an optional
//! label line. Chunk samples are nested `B x h x action_dim` arrays. Floats
//! are written in shortest round-trip form, so `write_log` followed by
//! `read_log` reproduces the log exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_dim, invalid, invariant, Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// File suffix used by the CLI for rollout logs.
pub const LOG_EXTENSION: &str = "sentinel.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutHeader {
    pub format_version: u32,
    /// Dimensions per single action.
    pub action_dim: usize,
    /// Number of actions predicted per chunk (h).
    pub prediction_horizon: usize,
    /// Number of actions executed before re-inference (k).
    pub execution_horizon: usize,
    /// Environment step budget (H).
    pub episode_limit: usize,
    /// Seconds per environment step.
    pub step_duration: f64,
    /// `true` marks dimensions that take part in distance computations.
    pub action_mask: Vec<bool>,
    pub task_description: String,
    pub task_time_limit: f64,
}

impl RolloutHeader {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: self.format_version,
                supported: FORMAT_VERSION,
            });
        }
        let (h, k) = (self.prediction_horizon, self.execution_horizon);
        if k == 0 || k >= h {
            return Err(invariant(format!(
                "execution horizon must satisfy 0 < k < h (k={k}, h={h})"
            )));
        }
        if h > self.episode_limit {
            return Err(invariant(format!(
                "prediction horizon {h} exceeds episode limit {}",
                self.episode_limit
            )));
        }
        if self.action_dim == 0 {
            return Err(invariant("action_dim must be at least 1"));
        }
        if !(self.step_duration.is_finite() && self.step_duration > 0.0) {
            return Err(invariant("step_duration must be positive"));
        }
        if !(self.task_time_limit.is_finite() && self.task_time_limit > 0.0) {
            return Err(invariant("task_time_limit must be positive"));
        }
        if self.action_mask.len() != self.action_dim {
            return Err(invariant(format!(
                "action_mask has {} entries for {} action dimensions",
                self.action_mask.len(),
                self.action_dim
            )));
        }
        if !self.action_mask.iter().any(|&m| m) {
            return Err(invariant("action_mask must keep at least one dimension"));
        }
        Ok(())
    }

    /// Number of action dimensions kept by the mask.
    pub fn masked_dim(&self) -> usize {
        self.action_mask.iter().filter(|&&m| m).count()
    }

    /// Number of temporally overlapping actions between consecutive chunks.
    pub fn overlap_len(&self) -> usize {
        self.prediction_horizon - self.execution_horizon
    }
}

/// A batch of `B` sampled action chunks, each `horizon x action_dim`,
/// stored row-major in one buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkBatch {
    batch: usize,
    horizon: usize,
    action_dim: usize,
    data: Vec<f64>,
}

impl ChunkBatch {
    pub fn from_flat(batch: usize, horizon: usize, action_dim: usize, data: Vec<f64>) -> Result<Self> {
        if batch == 0 || horizon == 0 || action_dim == 0 {
            return Err(invalid("chunk batch dimensions must be nonzero"));
        }
        check_dim(batch * horizon * action_dim, data.len())?;
        Ok(Self { batch, horizon, action_dim, data })
    }

    /// Builds a batch from nested `[chunk][step][dim]` values, checking that
    /// the nesting is rectangular.
    pub fn from_nested(nested: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let batch = nested.len();
        let horizon = nested.first().map_or(0, Vec::len);
        let action_dim = nested.first().and_then(|c| c.first()).map_or(0, Vec::len);
        let mut data = Vec::with_capacity(batch * horizon * action_dim);
        for chunk in &nested {
            check_dim(horizon, chunk.len())?;
            for action in chunk {
                check_dim(action_dim, action.len())?;
                data.extend_from_slice(action);
            }
        }
        Self::from_flat(batch, horizon, action_dim, data)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Length of one flattened chunk.
    pub fn chunk_len(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn chunk(&self, b: usize) -> &[f64] {
        let len = self.chunk_len();
        &self.data[b * len..(b + 1) * len]
    }

    pub fn chunks(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.chunk_len())
    }

    pub fn get(&self, b: usize, step: usize, dim: usize) -> f64 {
        self.data[(b * self.horizon + step) * self.action_dim + dim]
    }

    /// Flattened `steps x kept-dims` slice of chunk `b`, time-major.
    pub fn flatten_window(&self, b: usize, steps: std::ops::Range<usize>, mask: &[bool]) -> Vec<f64> {
        let mut out = Vec::with_capacity(steps.len() * mask.len());
        for step in steps {
            for (dim, &keep) in mask.iter().enumerate() {
                if keep {
                    out.push(self.get(b, step, dim));
                }
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn to_nested(&self) -> Vec<Vec<&[f64]>> {
        self.chunks()
            .map(|c| c.chunks_exact(self.action_dim).collect())
            .collect()
    }
}

impl Serialize for ChunkBatch {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_nested().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ChunkBatch {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let nested = Vec::<Vec<Vec<f64>>>::deserialize(deserializer)?;
        ChunkBatch::from_nested(nested).map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub timestep: usize,
    pub chunk_samples: ChunkBatch,
    pub executed_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_ref: Option<String>,
}

impl InferenceRecord {
    /// The chunk that was actually executed.
    pub fn executed_chunk(&self) -> &[f64] {
        self.chunk_samples.chunk(self.executed_index)
    }

    fn validate(&self, header: &RolloutHeader) -> Result<()> {
        let t = self.timestep;
        if !t.is_multiple_of(header.execution_horizon) {
            return Err(invariant(format!(
                "timestep {t} is not a multiple of k={}",
                header.execution_horizon
            )));
        }
        let chunks = &self.chunk_samples;
        if chunks.horizon() != header.prediction_horizon || chunks.action_dim() != header.action_dim {
            return Err(invariant(format!(
                "record at t={t} has chunks of shape {}x{}, header declares {}x{}",
                chunks.horizon(),
                chunks.action_dim(),
                header.prediction_horizon,
                header.action_dim
            )));
        }
        if !chunks.all_finite() {
            return Err(invariant(format!("record at t={t} contains non-finite action values")));
        }
        if self.executed_index >= chunks.batch() {
            return Err(invariant(format!(
                "record at t={t}: executed_index {} out of range for batch {}",
                self.executed_index,
                chunks.batch()
            )));
        }
        if let Some(z) = &self.embedding {
            if !z.iter().all(|v| v.is_finite()) {
                return Err(invariant(format!("record at t={t} has a non-finite embedding")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
}

/// Ground-truth outcome: failure iff the trajectory return is below the
/// success threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub outcome: Outcome,
    #[serde(rename = "return")]
    pub return_value: f64,
    pub threshold: f64,
}

impl Label {
    pub fn from_return(return_value: f64, threshold: f64) -> Self {
        let outcome = if return_value < threshold {
            Outcome::Failure
        } else {
            Outcome::Success
        };
        Self { outcome, return_value, threshold }
    }

    fn validate(&self) -> Result<()> {
        if !(self.return_value.is_finite() && self.threshold.is_finite()) {
            return Err(invariant("label return and threshold must be finite"));
        }
        let expected = Label::from_return(self.return_value, self.threshold).outcome;
        if expected != self.outcome {
            return Err(invariant(format!(
                "label {:?} inconsistent with return {} and threshold {}",
                self.outcome, self.return_value, self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutLog {
    pub header: RolloutHeader,
    pub records: Vec<InferenceRecord>,
    pub label: Option<Label>,
}

impl RolloutLog {
    /// Checks every declared invariant of the header, the records, and the label.
    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        let k = self.header.execution_horizon;
        for (j, record) in self.records.iter().enumerate() {
            record.validate(&self.header)?;
            if j > 0 {
                let prev = self.records[j - 1].timestep;
                if record.timestep != prev + k {
                    return Err(invariant(format!(
                        "record timesteps must increase by k={k}: {prev} followed by {}",
                        record.timestep
                    )));
                }
            }
        }
        if let Some(last) = self.records.last() {
            if last.timestep + 1 > self.header.episode_limit {
                return Err(invariant(format!(
                    "last timestep {} exceeds episode limit {}",
                    last.timestep, self.header.episode_limit
                )));
            }
        }
        if let Some(label) = &self.label {
            label.validate()?;
        }
        Ok(())
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.label.as_ref().map(|l| l.outcome)
    }

    /// A copy holding only the first `n` records.
    pub fn truncated(&self, n: usize) -> RolloutLog {
        RolloutLog {
            header: self.header.clone(),
            records: self.records[..n.min(self.records.len())].to_vec(),
            label: self.label.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine {
    Header(RolloutHeader),
    Record(InferenceRecord),
    Label(Label),
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLineRef<'a> {
    Header(&'a RolloutHeader),
    Record(&'a InferenceRecord),
    Label(&'a Label),
}

/// Serializes a validated log to its line-delimited form.
pub fn write_log_to<W: Write>(log: &RolloutLog, mut out: W) -> Result<()> {
    log.validate()?;
    let mut emit = |line: LogLineRef<'_>| -> Result<()> {
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
        Ok(())
    };
    emit(LogLineRef::Header(&log.header))?;
    for record in &log.records {
        emit(LogLineRef::Record(record))?;
    }
    if let Some(label) = &log.label {
        emit(LogLineRef::Label(label))?;
    }
    Ok(())
}

pub fn write_log(log: &RolloutLog, destination: impl AsRef<Path>) -> Result<()> {
    // Validate before touching the filesystem so invalid logs leave no file.
    log.validate()?;
    let mut writer = BufWriter::new(File::create(destination)?);
    write_log_to(log, &mut writer)?;
    writer.flush()?;
    Ok(())
}

pub fn read_log_from<R: BufRead>(input: R) -> Result<RolloutLog> {
    let mut header: Option<RolloutHeader> = None;
    let mut records = Vec::new();
    let mut label = None;
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: line_no, message };
        if label.is_some() {
            return Err(parse_err("content after the label line".into()));
        }
        let parsed: LogLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        match (parsed, &header) {
            (LogLine::Header(h), None) => {
                if h.format_version != FORMAT_VERSION {
                    return Err(Error::UnsupportedVersion {
                        found: h.format_version,
                        supported: FORMAT_VERSION,
                    });
                }
                header = Some(h);
            }
            (LogLine::Header(_), Some(_)) => return Err(parse_err("duplicate header line".into())),
            (_, None) => return Err(parse_err("first line must be the header".into())),
            (LogLine::Record(r), Some(_)) => records.push(r),
            (LogLine::Label(l), Some(_)) => label = Some(l),
        }
    }
    let header = header.ok_or_else(|| Error::Parse { line: 1, message: "missing header line".into() })?;
    let log = RolloutLog { header, records, label };
    log.validate()?;
    Ok(log)
}

pub fn read_log(source: impl AsRef<Path>) -> Result<RolloutLog> {
    read_log_from(BufReader::new(File::open(source)?))
}

/// Restricts every sampled chunk of `record` to the dimensions kept by `mask`.
pub fn apply_mask(record: &InferenceRecord, mask: &[bool]) -> Result<ChunkBatch> {
    let chunks = &record.chunk_samples;
    check_dim(chunks.action_dim(), mask.len())?;
    let kept = mask.iter().filter(|&&m| m).count();
    if kept == 0 {
        return Err(invalid("mask must keep at least one dimension"));
    }
    let mut data = Vec::with_capacity(chunks.batch() * chunks.horizon() * kept);
    for b in 0..chunks.batch() {
        data.extend(chunks.flatten_window(b, 0..chunks.horizon(), mask));
    }
    ChunkBatch::from_flat(chunks.batch(), chunks.horizon(), kept, data)
}
