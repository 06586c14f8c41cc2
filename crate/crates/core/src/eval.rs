//! Detector combination, detection metrics and synthetic benchmarks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::baselines::{build_detector, score_series, DetectorContext, DetectorKind};
use crate::conformal::{conformal_threshold, leave_trajectory_out_stats, EmbeddingStats, DEFAULT_DELTA};
use crate::error::{invalid, Result};
use crate::policy::{generate_rollout, trajectory_policy, Behavior, LabelRule, Scene, SyntheticGmmPolicy};
use crate::rollout::{Outcome, RolloutLog};
use crate::stac::{detect_online, ScoreSeries};
use crate::vlm::{self, query_monitor, subsample_frames, Assessment, MonitorPrompt, TemplateId, Transport, TransportError, VlmRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Ok,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerdictSource {
    Stac,
    Vlm,
    Baseline(String),
    Sentinel,
}

impl VerdictSource {
    pub fn for_detector(kind: DetectorKind) -> Self {
        match kind {
            DetectorKind::StacMmd | DetectorKind::StacKlf | DetectorKind::StacKlr => Self::Stac,
            other => Self::Baseline(other.name().into()),
        }
    }
}

impl std::fmt::Display for VerdictSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Stac => f.write_str("stac"),
            Self::Vlm => f.write_str("vlm"),
            Self::Baseline(name) => write!(f, "baseline:{name}"),
            Self::Sentinel => f.write_str("sentinel"),
        }
    }
}

impl Serialize for VerdictSource {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for VerdictSource {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(match s.as_str() {
            "stac" => Self::Stac,
            "vlm" => Self::Vlm,
            "sentinel" => Self::Sentinel,
            other => match other.strip_prefix("baseline:") {
                Some(name) if !name.is_empty() => Self::Baseline(name.into()),
                _ => return Err(serde::de::Error::custom(format!("unknown verdict source `{s}`"))),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: Decision,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection_timestep: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection_seconds: Option<f64>,
    pub source: VerdictSource,
}

impl Verdict {
    pub fn ok(source: VerdictSource) -> Self {
        Self { decision: Decision::Ok, detection_timestep: None, detection_seconds: None, source }
    }

    pub fn failure(source: VerdictSource, timestep: usize, step_duration: f64) -> Self {
        Self {
            decision: Decision::Failure,
            detection_timestep: Some(timestep),
            detection_seconds: Some(timestep as f64 * step_duration),
            source,
        }
    }

    pub fn from_detection(source: VerdictSource, detection: Option<usize>, step_duration: f64) -> Self {
        match detection {
            Some(t) => Self::failure(source, t, step_duration),
            None => Self::ok(source),
        }
    }

    pub fn is_failure(&self) -> bool {
        self.decision == Decision::Failure
    }
}

/// One evaluation of a detector at an environment timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tick {
    pub timestep: usize,
    pub status: TickStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TickStatus {
    Ok,
    Failure,
    /// The detector could not answer; never counts as a verdict.
    Unavailable,
}

fn first_failure(stream: &[Tick]) -> Option<usize> {
    stream.iter().filter(|t| t.status == TickStatus::Failure).map(|t| t.timestep).min()
}

/// Verdict of a single tick stream.
pub fn stream_verdict(source: VerdictSource, stream: &[Tick], step_duration: f64) -> Verdict {
    Verdict::from_detection(source, first_failure(stream), step_duration)
}

/// Union of the two streams: failure at the earliest warning from either.
pub fn combine(stac: &[Tick], vlm: &[Tick], step_duration: f64) -> Verdict {
    let t = [first_failure(stac), first_failure(vlm)].into_iter().flatten().min();
    Verdict::from_detection(VerdictSource::Sentinel, t, step_duration)
}

/// Union of two finished verdicts.
pub fn combine_verdicts(a: &Verdict, b: &Verdict, step_duration: f64) -> Verdict {
    let t = [a.detection_timestep, b.detection_timestep].into_iter().flatten().min();
    Verdict::from_detection(VerdictSource::Sentinel, t, step_duration)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Rates that need both classes are omitted when a class is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tpr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fpr: Option<f64>,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub balanced_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_detection_seconds: Option<f64>,
    pub counts: Counts,
}

pub fn compute_metrics(verdicts: &[Verdict], labels: &[Outcome]) -> Result<MetricsReport> {
    if verdicts.len() != labels.len() {
        return Err(invalid(format!("{} verdicts for {} labels", verdicts.len(), labels.len())));
    }
    if verdicts.is_empty() {
        return Err(invalid("metrics need at least one trajectory"));
    }
    let mut c = Counts::default();
    let mut det_times = Vec::new();
    for (v, l) in verdicts.iter().zip(labels) {
        match (v.is_failure(), l) {
            (true, Outcome::Failure) => {
                c.tp += 1;
                det_times.extend(v.detection_seconds);
            }
            (false, Outcome::Failure) => c.fn_ += 1,
            (true, Outcome::Success) => c.fp += 1,
            (false, Outcome::Success) => c.tn += 1,
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let tpr = ratio(c.tp, c.tp + c.fn_);
    let tnr = ratio(c.tn, c.tn + c.fp);
    Ok(MetricsReport {
        tpr,
        tnr,
        fpr: ratio(c.fp, c.tn + c.fp),
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        balanced_accuracy: tpr.zip(tnr).map(|(a, b)| (a + b) / 2.0),
        mean_detection_seconds: (!det_times.is_empty()).then(|| det_times.iter().sum::<f64>() / det_times.len() as f64),
        counts: c,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestGroup {
    pub behavior: Behavior,
    pub count: usize,
}

/// Offline stand-in for a VLM endpoint that answers from ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockVlmConfig {
    pub template: TemplateId,
    /// Query times as fractions of the episode limit.
    pub checkpoints: Vec<f64>,
    /// Failures are flagged only from this fraction of the episode on.
    pub flag_from: f64,
    /// Probability of flagging a failure trajectory at an eligible checkpoint.
    pub true_positive_rate: f64,
    /// Probability of flagging a success trajectory at any checkpoint.
    pub false_positive_rate: f64,
    /// Frame subsampling factor `nu`.
    pub nu: usize,
}

impl Default for MockVlmConfig {
    fn default() -> Self {
        Self {
            template: TemplateId::VideoQa,
            checkpoints: vec![0.5, 1.0],
            flag_from: 0.5,
            true_positive_rate: 1.0,
            false_positive_rate: 0.0,
            nu: 1,
        }
    }
}

impl MockVlmConfig {
    fn validate(&self) -> Result<()> {
        if self.checkpoints.is_empty() || self.checkpoints.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(invalid("vlm.checkpoints must be fractions in (0, 1]"));
        }
        if self.checkpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("vlm.checkpoints must be increasing"));
        }
        for (name, p) in [("true_positive_rate", self.true_positive_rate), ("false_positive_rate", self.false_positive_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("vlm.{name} must lie in [0, 1]")));
            }
        }
        if !matches!(self.template, TemplateId::VideoQa | TemplateId::ImageQa) {
            return Err(invalid("the mock VLM supports the video_qa and image_qa templates"));
        }
        if self.nu == 0 {
            return Err(invalid("vlm.nu must be at least 1"));
        }
        Ok(())
    }

    /// Environment timestep at which the query for `fraction` is issued.
    pub fn checkpoint_timestep(fraction: f64, episode_limit: usize) -> usize {
        ((fraction * episode_limit as f64).ceil() as usize).clamp(1, episode_limit) - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub scene: Scene,
    pub calibration: usize,
    pub test: Vec<TestGroup>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "all_detectors")]
    pub detectors: Vec<DetectorKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vlm: Option<MockVlmConfig>,
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

fn all_detectors() -> Vec<DetectorKind> {
    DetectorKind::ALL.to_vec()
}

/// Offset separating calibration and test random streams.
const TEST_STREAM_OFFSET: u64 = 1 << 32;
/// Calibration generation gives up after this many attempts per requested success.
const CALIBRATION_ATTEMPTS: usize = 20;

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.calibration == 0 {
            return Err(invalid("calibration count must be at least 1"));
        }
        if self.test.iter().map(|g| g.count).sum::<usize>() == 0 {
            return Err(invalid("test set is empty"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid("delta must lie in (0, 1)"));
        }
        if self.detectors.is_empty() {
            return Err(invalid("no detectors selected"));
        }
        if let Some(v) = &self.vlm {
            v.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Success-labeled nominal rollouts: consistent behavior, failures discarded.
pub fn calibration_rollouts(scene: &Scene, seed: u64, count: usize) -> Result<Vec<(u64, RolloutLog)>> {
    let rule = LabelRule::GoalBall { radius: scene.goal_radius };
    let mut out = Vec::with_capacity(count);
    let mut next = 0u64;
    let batch = count.max(rayon::current_num_threads());
    while out.len() < count {
        if next as usize >= count * CALIBRATION_ATTEMPTS {
            return Err(invalid("could not generate enough successful calibration rollouts"));
        }
        let logs = (next..next + batch as u64)
            .into_par_iter()
            .map(|i| Ok((i, generate_rollout(&mut trajectory_policy(scene, Behavior::Consistent, seed, i)?, &rule)?)))
            .collect::<Result<Vec<_>>>()?;
        next += batch as u64;
        out.extend(logs.into_iter().filter(|(_, l)| l.outcome() == Some(Outcome::Success)));
    }
    out.truncate(count);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TestRollout {
    pub index: u64,
    pub behavior: Behavior,
    pub log: RolloutLog,
}

pub fn test_rollouts(scene: &Scene, seed: u64, groups: &[TestGroup]) -> Result<Vec<TestRollout>> {
    let rule = LabelRule::GoalBall { radius: scene.goal_radius };
    let jobs: Vec<(u64, Behavior)> = groups
        .iter()
        .flat_map(|g| std::iter::repeat_n(g.behavior, g.count))
        .enumerate()
        .map(|(i, b)| (TEST_STREAM_OFFSET + i as u64, b))
        .collect();
    jobs.into_par_iter()
        .map(|(index, behavior)| {
            let log = generate_rollout(&mut trajectory_policy(scene, behavior, seed, index)?, &rule)?;
            Ok(TestRollout { index, behavior, log })
        })
        .collect()
}

/// Scripted classifier behind the real prompt, transport and parsing path.
struct ScriptedVlm {
    failure: bool,
    eligible: bool,
    tpr: f64,
    fpr: f64,
    draw: f64,
}

impl Transport for ScriptedVlm {
    fn send(&self, _request: &VlmRequest, _timeout: Duration) -> Result<String, TransportError> {
        let flag = if self.failure && self.eligible { self.draw < self.tpr } else { self.draw < self.fpr };
        let (analysis, assessment) = if flag {
            ("The robot is not making progress toward the goal.", Assessment::Failure)
        } else {
            ("The robot is progressing as expected.", Assessment::Ok)
        };
        Ok(vlm::render_response("Where is the robot relative to the goal?", "See frames.", analysis, assessment))
    }
}

/// Mock VLM tick stream for one trajectory.
pub fn mock_vlm_ticks(cfg: &MockVlmConfig, log: &RolloutLog, seed: u64, index: u64) -> Vec<Tick> {
    let header = &log.header;
    let failure = log.outcome() == Some(Outcome::Failure);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(index);
    cfg.checkpoints
        .iter()
        .map(|&fraction| {
            let timestep = MockVlmConfig::checkpoint_timestep(fraction, header.episode_limit);
            let frames: Vec<String> = (0..=timestep).map(|t| format!("frame:{t:05}")).collect();
            let frames = subsample_frames(&frames, header.execution_horizon, cfg.nu).unwrap_or_default();
            let prompt = MonitorPrompt {
                template_id: cfg.template,
                task_description: header.task_description.clone(),
                elapsed_seconds: (timestep + 1) as f64 * header.step_duration,
                time_limit_seconds: header.task_time_limit,
                frames,
                auxiliary_frames: None,
            };
            let transport = ScriptedVlm {
                failure,
                eligible: fraction >= cfg.flag_from,
                tpr: cfg.true_positive_rate,
                fpr: cfg.false_positive_rate,
                draw: rng.random(),
            };
            let status = match query_monitor(&prompt, &transport, vlm::DEFAULT_TIMEOUT) {
                Ok(o) if o.response.assessment == Assessment::Failure => TickStatus::Failure,
                Ok(_) => TickStatus::Ok,
                Err(_) => TickStatus::Unavailable,
            };
            Tick { timestep, status }
        })
        .collect()
}

fn ser_threshold<S: Serializer>(gamma: &f64, s: S) -> Result<S::Ok, S::Error> {
    if gamma.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*gamma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectorReport {
    #[serde(serialize_with = "ser_threshold")]
    pub gamma: f64,
    pub calibration_m: usize,
    pub quantile_index: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub index: u64,
    pub behavior: Behavior,
    pub outcome: Outcome,
    pub terminal_scores: BTreeMap<String, f64>,
    pub detections: BTreeMap<String, Option<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vlm_detection: Option<Option<usize>>,
    pub sentinel_detection: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub config: ScenarioConfig,
    pub calibration_indices: Vec<u64>,
    pub test_indices: Vec<u64>,
    pub detectors: BTreeMap<String, DetectorReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vlm: Option<MetricsReport>,
    /// Union of the primary STAC detector and the VLM monitor.
    pub sentinel: MetricsReport,
    pub trajectories: Vec<TrajectoryRow>,
}

pub struct BenchmarkRun {
    pub report: BenchmarkReport,
    /// Cumulative scores of the first selected STAC detector per test rollout.
    pub chart_series: Vec<(Outcome, ScoreSeries)>,
    pub chart_gamma: f64,
    pub chart_detector: DetectorKind,
}

/// The detector paired with the VLM in the sentinel union.
fn primary_detector(kinds: &[DetectorKind]) -> DetectorKind {
    [DetectorKind::StacMmd, DetectorKind::StacKlf, DetectorKind::StacKlr]
        .into_iter()
        .find(|k| kinds.contains(k))
        .unwrap_or(kinds[0])
}

/// Calibrates every configured detector on nominal rollouts, scores a mixed
/// test set and reports detection metrics.
pub fn run_benchmark(config: &ScenarioConfig) -> Result<BenchmarkRun> {
    config.validate()?;
    let scene = &config.scene;
    let step = scene.step_duration;
    let calibration = calibration_rollouts(scene, config.seed, config.calibration)?;
    let tests = test_rollouts(scene, config.seed, &config.test)?;
    let labels: Vec<Outcome> = tests.iter().map(|t| t.log.outcome().unwrap_or(Outcome::Success)).collect();
    let oracle = SyntheticGmmPolicy::detour(scene.clone(), Behavior::Consistent, config.seed)?;

    let mut detectors_sorted = config.detectors.clone();
    detectors_sorted.sort();
    detectors_sorted.dedup();
    let primary = primary_detector(&detectors_sorted);

    let mut reports = BTreeMap::new();
    let mut verdicts_by_kind = BTreeMap::new();
    let mut test_series_by_kind = BTreeMap::new();
    for &kind in &detectors_sorted {
        let base_ctx = DetectorContext { oracle: Some(&oracle), embedding_stats: None, seed: config.seed };
        let cal_terminals: Vec<f64> = if kind.needs_embeddings() {
            let embeds = calibration.iter().map(|(_, l)| embeddings(l)).collect::<Result<Vec<_>>>()?;
            let lto = leave_trajectory_out_stats(&embeds)?;
            calibration
                .par_iter()
                .zip(lto.par_iter())
                .map(|((_, log), stats)| {
                    let f = build_detector(kind, DetectorContext { embedding_stats: Some(stats), ..base_ctx })?;
                    Ok(score_series(f.as_ref(), log)?.terminal())
                })
                .collect::<Result<_>>()?
        } else {
            let f = build_detector(kind, base_ctx)?;
            calibration.par_iter().map(|(_, log)| Ok(score_series(f.as_ref(), log)?.terminal())).collect::<Result<_>>()?
        };
        let cal = conformal_threshold(&cal_terminals, config.delta)?;

        let full_stats;
        let ctx = if kind.needs_embeddings() {
            let all: Vec<Vec<f64>> = calibration.iter().map(|(_, l)| embeddings(l)).collect::<Result<Vec<_>>>()?.concat();
            full_stats = EmbeddingStats::fit(all.iter().map(Vec::as_slice))?;
            DetectorContext { embedding_stats: Some(&full_stats), ..base_ctx }
        } else {
            base_ctx
        };
        let f = build_detector(kind, ctx)?;
        let series: Vec<ScoreSeries> = tests.par_iter().map(|t| score_series(f.as_ref(), &t.log)).collect::<Result<_>>()?;
        let verdicts: Vec<Verdict> = series
            .iter()
            .map(|s| Verdict::from_detection(VerdictSource::for_detector(kind), detect_online(s, cal.gamma), step))
            .collect();
        reports.insert(
            kind.name().to_string(),
            DetectorReport {
                gamma: cal.gamma,
                calibration_m: cal.m,
                quantile_index: cal.quantile_index,
                metrics: compute_metrics(&verdicts, &labels)?,
            },
        );
        verdicts_by_kind.insert(kind, verdicts);
        test_series_by_kind.insert(kind, (series, cal.gamma));
    }

    let vlm_verdicts: Option<Vec<Verdict>> = config.vlm.as_ref().map(|cfg| {
        tests
            .par_iter()
            .map(|t| stream_verdict(VerdictSource::Vlm, &mock_vlm_ticks(cfg, &t.log, config.seed, t.index), step))
            .collect()
    });
    let primary_verdicts = &verdicts_by_kind[&primary];
    let sentinel: Vec<Verdict> = match &vlm_verdicts {
        Some(v) => primary_verdicts.iter().zip(v).map(|(a, b)| combine_verdicts(a, b, step)).collect(),
        None => primary_verdicts.iter().map(|a| combine_verdicts(a, a, step)).collect(),
    };

    let trajectories = tests
        .iter()
        .enumerate()
        .map(|(i, t)| TrajectoryRow {
            index: t.index,
            behavior: t.behavior,
            outcome: labels[i],
            terminal_scores: test_series_by_kind.iter().map(|(k, (s, _))| (k.name().to_string(), s[i].terminal())).collect(),
            detections: verdicts_by_kind.iter().map(|(k, v)| (k.name().to_string(), v[i].detection_timestep)).collect(),
            vlm_detection: vlm_verdicts.as_ref().map(|v| v[i].detection_timestep),
            sentinel_detection: sentinel[i].detection_timestep,
        })
        .collect();

    let (chart, gamma) = test_series_by_kind.remove(&primary).expect("primary detector was scored");
    Ok(BenchmarkRun {
        report: BenchmarkReport {
            config: config.clone(),
            calibration_indices: calibration.iter().map(|(i, _)| *i).collect(),
            test_indices: tests.iter().map(|t| t.index).collect(),
            detectors: reports,
            vlm: vlm_verdicts.as_ref().map(|v| compute_metrics(v, &labels)).transpose()?,
            sentinel: compute_metrics(&sentinel, &labels)?,
            trajectories,
        },
        chart_series: labels.iter().copied().zip(chart).collect(),
        chart_gamma: gamma,
        chart_detector: primary,
    })
}

fn embeddings(log: &RolloutLog) -> Result<Vec<Vec<f64>>> {
    log.records
        .iter()
        .map(|r| r.embedding.clone().ok_or_else(|| invalid(format!("record at t={} has no embedding", r.timestep))))
        .collect()
}

impl BenchmarkReport {
    /// One row per test trajectory and detector.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,behavior,outcome,detector,terminal_score,detection_timestep\n");
        let opt = |t: Option<usize>| t.map(|t| t.to_string()).unwrap_or_default();
        for row in &self.trajectories {
            let outcome = match row.outcome {
                Outcome::Success => "success",
                Outcome::Failure => "failure",
            };
            for (name, score) in &row.terminal_scores {
                let _ = writeln!(out, "{},{},{outcome},{name},{score},{}", row.index, row.behavior.name(), opt(row.detections[name]));
            }
            if let Some(v) = row.vlm_detection {
                let _ = writeln!(out, "{},{},{outcome},vlm,,{}", row.index, row.behavior.name(), opt(v));
            }
            let _ = writeln!(out, "{},{},{outcome},sentinel,,{}", row.index, row.behavior.name(), opt(row.sentinel_detection));
        }
        out
    }
}

/// Line chart of cumulative scores, red for failures, with the threshold dashed.
pub fn render_svg(series: &[(Outcome, ScoreSeries)], gamma: f64, title: &str) -> String {
    let (w, h, pad) = (640.0, 400.0, 48.0);
    let t_max = series.iter().flat_map(|(_, s)| s.timesteps.last().copied()).max().unwrap_or(1).max(1) as f64;
    let mut y_max = series.iter().map(|(_, s)| s.terminal()).fold(0.0, f64::max);
    if gamma.is_finite() {
        y_max = y_max.max(gamma * 1.1);
    }
    let y_max = if y_max > 0.0 { y_max } else { 1.0 };
    let px = |t: f64| pad + (w - 2.0 * pad) * t / t_max;
    let py = |v: f64| h - pad - (h - 2.0 * pad) * v / y_max;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{pad}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n",
        escape(title),
        h - pad,
        w - pad,
        h - pad,
        h - pad
    );
    for (outcome, s) in series {
        let color = if *outcome == Outcome::Failure { "#d62728" } else { "#1f77b4" };
        let pts: Vec<String> = s
            .timesteps
            .iter()
            .zip(&s.cumulative)
            .map(|(&t, &c)| format!("{:.2},{:.2}", px(t as f64), py(c)))
            .collect();
        let _ = writeln!(svg, "<polyline fill=\"none\" stroke=\"{color}\" stroke-opacity=\"0.5\" points=\"{}\"/>", pts.join(" "));
    }
    if gamma.is_finite() {
        let y = py(gamma);
        let _ = writeln!(svg, "<line x1=\"{pad}\" y1=\"{y:.2}\" x2=\"{}\" y2=\"{y:.2}\" stroke=\"black\" stroke-dasharray=\"6 4\"/>", w - pad);
    }
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"end\">timestep</text>", w - pad, h - 16.0);
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `report.json`, `trajectories.csv` and `chart.svg` into `dir`.
pub fn write_artifacts(run: &BenchmarkRun, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(&run.report)?;
    std::fs::write(dir.join("report.json"), json + "\n")?;
    std::fs::write(dir.join("trajectories.csv"), run.report.to_csv())?;
    let title = format!("{}: {} cumulative score", run.report.config.name, run.chart_detector);
    std::fs::write(dir.join("chart.svg"), render_svg(&run.chart_series, run.chart_gamma, &title))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(t: Option<usize>) -> Verdict {
        Verdict::from_detection(VerdictSource::Stac, t, 0.1)
    }

    fn tick(timestep: usize, status: TickStatus) -> Tick {
        Tick { timestep, status }
    }

    #[test]
    fn union_examples() {
        use TickStatus::*;
        let stac = [tick(0, Ok), tick(4, Ok), tick(20, Failure)];
        assert_eq!(combine(&stac, &[], 0.1).detection_timestep, Some(20));
        assert_eq!(combine(&[tick(0, Ok)], &[tick(39, Ok), tick(79, Ok)], 0.1).decision, Decision::Ok);
        let vlm = [tick(39, Failure), tick(79, Failure)];
        let s = combine(&[tick(0, Ok), tick(76, Ok)], &vlm, 0.1);
        assert_eq!((s.decision, s.detection_timestep), (Decision::Failure, Some(39)));
        assert_eq!(s.source, VerdictSource::Sentinel);
        assert_eq!(combine(&stac, &[tick(39, Unavailable)], 0.1).detection_timestep, Some(20));
        assert_eq!(combine(&[tick(60, Failure)], &vlm, 0.1).detection_timestep, Some(39));
    }

    #[test]
    fn metrics_example() {
        let verdicts = [v(Some(4)), v(Some(8)), v(Some(12)), v(None)];
        let labels = [Outcome::Failure, Outcome::Failure, Outcome::Success, Outcome::Success];
        let m = compute_metrics(&verdicts, &labels).unwrap();
        assert_eq!((m.tpr, m.tnr, m.balanced_accuracy), (Some(1.0), Some(0.5), Some(0.75)));
        assert_eq!(m.fpr, Some(0.5));
        assert_eq!(m.accuracy, 0.75);
        assert!((m.mean_detection_seconds.unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn metrics_omit_undefined_rates() {
        let m = compute_metrics(&[v(None), v(None)], &[Outcome::Success, Outcome::Success]).unwrap();
        assert_eq!(m.tnr, Some(1.0));
        assert_eq!((m.tpr, m.balanced_accuracy, m.mean_detection_seconds), (None, None, None));
        let json = serde_json::to_value(&m).unwrap();
        assert!(json.get("tpr").is_none());
        assert!(compute_metrics(&[v(None)], &[]).is_err());
    }

    #[test]
    fn source_strings() {
        for (s, text) in [
            (VerdictSource::Stac, "\"stac\""),
            (VerdictSource::Vlm, "\"vlm\""),
            (VerdictSource::Sentinel, "\"sentinel\""),
            (VerdictSource::Baseline("ddpm".into()), "\"baseline:ddpm\""),
        ] {
            assert_eq!(serde_json::to_string(&s).unwrap(), text);
            assert_eq!(serde_json::from_str::<VerdictSource>(text).unwrap(), s);
        }
        assert!(serde_json::from_str::<VerdictSource>("\"baseline:\"").is_err());
    }

    #[test]
    fn checkpoints() {
        assert_eq!(MockVlmConfig::checkpoint_timestep(0.5, 80), 39);
        assert_eq!(MockVlmConfig::checkpoint_timestep(1.0, 80), 79);
        assert_eq!(MockVlmConfig::checkpoint_timestep(0.001, 80), 0);
    }

    #[test]
    fn config_validation() {
        let text = r#"{"name":"x","seed":1,"calibration":5,"test":[{"behavior":"drift","count":2}]}"#;
        let cfg = ScenarioConfig::from_json(text).unwrap();
        assert_eq!(cfg.detectors.len(), 10);
        assert_eq!(cfg.delta, 0.05);
        assert!(ScenarioConfig::from_json(&text.replace("\"calibration\":5", "\"calibration\":0")).is_err());
        assert!(ScenarioConfig::from_json(&text.replace("\"seed\":1", "\"seed\":1,\"bogus\":2")).is_err());
    }

    #[test]
    fn small_benchmark_is_reproducible() {
        let cfg = ScenarioConfig {
            name: "tiny".into(),
            seed: 3,
            scene: Scene::default(),
            calibration: 4,
            test: vec![TestGroup { behavior: Behavior::Consistent, count: 2 }, TestGroup { behavior: Behavior::ConstantStall, count: 2 }],
            delta: 0.5,
            detectors: vec![DetectorKind::StacMmd, DetectorKind::OutVar, DetectorKind::Mahalanobis],
            vlm: Some(MockVlmConfig::default()),
        };
        let a = run_benchmark(&cfg).unwrap();
        let b = run_benchmark(&cfg).unwrap();
        assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
        assert_eq!(a.report.detectors.len(), 3);
        let vlm = a.report.vlm.as_ref().unwrap();
        assert_eq!(vlm.tpr, Some(1.0));
        assert_eq!(a.report.sentinel.tpr, Some(1.0));
        assert!(a.report.to_csv().lines().count() > 4);
        let svg = render_svg(&a.chart_series, a.chart_gamma, "t");
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }
}
