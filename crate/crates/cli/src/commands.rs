use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use sentinel_core::baselines::{build_detector, score_series, DetectorContext, DetectorKind};
use sentinel_core::conformal::{conformal_threshold, leave_trajectory_out_stats, CalibrationResult, EmbeddingStats};
use sentinel_core::eval::{run_benchmark, write_artifacts, MockVlmConfig, ScenarioConfig, Verdict, VerdictSource};
use sentinel_core::policy::{generate_rollout, trajectory_policy, Behavior, LabelRule, Scene, SyntheticGmmPolicy};
use sentinel_core::rollout::{read_log, write_log, Outcome, RolloutHeader, RolloutLog, LOG_EXTENSION};
use sentinel_core::stac::detect_online;
use sentinel_core::vlm::{
    ensemble_vote, query_monitor, subsample_frames, task_description, Assessment, HttpTransport, MockTransport, MonitorPrompt,
    TemplateId, Transport, VlmError,
};
use sentinel_core::Error;

use crate::{CalibrateArgs, DetectArgs, EvalArgs, Scenario, SynthArgs, TransportKind, VlmArgs};

#[derive(Debug)]
pub struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => "invalid_argument",
            Error::Invariant(_) => "invariant",
            Error::Parse { .. } | Error::Json(_) => "parse",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::UnknownDetector(_) => "unknown_detector",
            Error::MissingOracle(_) => "missing_oracle",
            Error::Vlm(v) => vlm_kind(v),
            Error::Io(_) => "io",
        };
        Self::new(kind, e.to_string())
    }
}

fn vlm_kind(e: &VlmError) -> &'static str {
    match e {
        VlmError::Auth(_) => "auth",
        VlmError::MissingFrame(_) => "missing_frames",
        VlmError::Unavailable(_) => "monitor_unavailable",
        VlmError::Parse(_) => "parse",
        _ => "invalid_argument",
    }
}

impl From<VlmError> for CliError {
    fn from(e: VlmError) -> Self {
        Self::new(vlm_kind(&e), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new("parse", e.to_string())
    }
}

type CliResult<T = Value> = Result<T, CliError>;

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::new("parse", format!("{}: {e}", path.display())))
}

fn load_scene(path: Option<&Path>) -> CliResult<Scene> {
    let scene: Scene = match path {
        Some(p) => read_json(p)?,
        None => Scene::default(),
    };
    scene.validate()?;
    Ok(scene)
}

fn behavior(s: Scenario) -> Behavior {
    match s {
        Scenario::Nominal => Behavior::Consistent,
        Scenario::Erratic => Behavior::ModeResample,
        Scenario::Stall => Behavior::ConstantStall,
        Scenario::Drift => Behavior::Drift,
    }
}

fn scenario_name(s: Scenario) -> &'static str {
    match s {
        Scenario::Nominal => "nominal",
        Scenario::Erratic => "erratic",
        Scenario::Stall => "stall",
        Scenario::Drift => "drift",
    }
}

fn outcome_name(o: Option<Outcome>) -> &'static str {
    match o {
        Some(Outcome::Success) => "success",
        Some(Outcome::Failure) => "failure",
        None => "unlabeled",
    }
}

pub fn synth(a: &SynthArgs) -> CliResult {
    if a.n == 0 {
        return Err(CliError::new("invalid_argument", "--n must be at least 1"));
    }
    let scene = load_scene(a.config.as_deref())?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::new("io", format!("{}: {e}", a.out.display())))?;
    let rule = LabelRule::GoalBall { radius: scene.goal_radius };
    let name = scenario_name(a.scenario);
    let files = (0..a.n)
        .into_par_iter()
        .map(|i| {
            let log = generate_rollout(&mut trajectory_policy(&scene, behavior(a.scenario), a.seed, i as u64)?, &rule)?;
            let path = a.out.join(format!("{name}_{i:04}.{LOG_EXTENSION}"));
            write_log(&log, &path)?;
            Ok(json!({ "path": path.display().to_string(), "outcome": outcome_name(log.outcome()) }))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let successes = files.iter().filter(|f| f["outcome"] == "success").count();
    Ok(json!({ "scenario": name, "seed": a.seed, "n": a.n, "successes": successes, "files": files }))
}

/// Calibration output: the threshold plus what is needed to rescore.
#[derive(Debug, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub detector: DetectorKind,
    #[serde(flatten)]
    pub result: CalibrationResult,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_stats: Option<EmbeddingStats>,
}

fn oracle_for(kind: DetectorKind, scene_path: Option<&Path>, header: &RolloutHeader) -> CliResult<Option<SyntheticGmmPolicy>> {
    if !kind.needs_oracle() {
        return Ok(None);
    }
    let scene = load_scene(scene_path)?;
    let expected = scene.header();
    if expected.prediction_horizon != header.prediction_horizon || expected.action_dim != header.action_dim {
        return Err(CliError::new("invalid_argument", "log chunk shape does not match the policy oracle scene"));
    }
    Ok(Some(SyntheticGmmPolicy::detour(scene, Behavior::Consistent, 0)?))
}

fn same_shape(a: &RolloutHeader, b: &RolloutHeader) -> bool {
    a.action_dim == b.action_dim
        && a.prediction_horizon == b.prediction_horizon
        && a.execution_horizon == b.execution_horizon
        && a.action_mask == b.action_mask
}

fn embeddings(log: &RolloutLog) -> CliResult<Vec<Vec<f64>>> {
    log.records
        .iter()
        .map(|r| r.embedding.clone().ok_or_else(|| CliError::new("invalid_argument", "mahalanobis needs embeddings in every record")))
        .collect()
}

pub fn calibrate(a: &CalibrateArgs) -> CliResult {
    let kind: DetectorKind = a.detector.parse()?;
    let mut paths: Vec<PathBuf> = glob::glob(&a.logs)
        .map_err(|e| CliError::new("invalid_argument", format!("bad glob: {e}")))?
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::new("io", e.to_string()))?;
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::new("invalid_argument", format!("no logs match `{}`", a.logs)));
    }
    let logs = paths.par_iter().map(read_log).collect::<Result<Vec<_>, _>>()?;
    for (p, log) in paths.iter().zip(&logs) {
        if log.outcome() != Some(Outcome::Success) {
            return Err(CliError::new(
                "invalid_argument",
                format!("{} is labeled {}; calibration accepts successful rollouts only", p.display(), outcome_name(log.outcome())),
            ));
        }
        if !same_shape(&log.header, &logs[0].header) {
            return Err(CliError::new("invalid_argument", format!("{} has a different header shape", p.display())));
        }
    }
    let oracle = oracle_for(kind, a.config.as_deref(), &logs[0].header)?;
    let base = DetectorContext { oracle: oracle.as_ref().map(|o| o as _), embedding_stats: None, seed: a.seed };
    let (terminals, stats): (Vec<f64>, Option<EmbeddingStats>) = if kind.needs_embeddings() {
        let embeds = logs.iter().map(embeddings).collect::<CliResult<Vec<_>>>()?;
        let lto = leave_trajectory_out_stats(&embeds)?;
        let terminals = logs
            .par_iter()
            .zip(&lto)
            .map(|(log, s)| Ok(score_series(build_detector(kind, DetectorContext { embedding_stats: Some(s), ..base })?.as_ref(), log)?.terminal()))
            .collect::<Result<_, Error>>()?;
        let all = embeds.concat();
        (terminals, Some(EmbeddingStats::fit(all.iter().map(Vec::as_slice))?))
    } else {
        let f = build_detector(kind, base)?;
        let terminals = logs.par_iter().map(|log| Ok(score_series(f.as_ref(), log)?.terminal())).collect::<Result<_, Error>>()?;
        (terminals, None)
    };
    let result = conformal_threshold(&terminals, a.delta)?;
    if result.is_vacuous() {
        eprintln!(
            "{}",
            json!({ "warning": format!("quantile index {} exceeds M = {}; the threshold is infinite and the detector never fires", result.quantile_index, result.m) })
        );
    }
    let file = CalibrationFile { detector: kind, result, seed: a.seed, embedding_stats: stats };
    std::fs::write(&a.out, serde_json::to_string_pretty(&file)? + "\n")?;
    Ok(json!({
        "detector": kind.name(),
        "gamma": serde_json::to_value(&file.result)?["gamma"],
        "m": file.result.m,
        "quantile_index": file.result.quantile_index,
        "delta": file.result.delta,
        "out": a.out.display().to_string(),
    }))
}

pub fn detect(a: &DetectArgs) -> CliResult {
    let kind: DetectorKind = a.detector.parse()?;
    let cal: CalibrationFile = read_json(&a.calibration)?;
    if cal.detector != kind {
        return Err(CliError::new(
            "invalid_argument",
            format!("calibration is for `{}`, not `{}`", cal.detector, kind),
        ));
    }
    let log = read_log(&a.log)?;
    let oracle = oracle_for(kind, a.config.as_deref(), &log.header)?;
    if let Some(stats) = &cal.embedding_stats {
        if log.records.iter().any(|r| r.embedding.as_ref().is_some_and(|e| e.len() != stats.dim())) {
            return Err(CliError::new("invalid_argument", "log embeddings do not match the calibration statistics"));
        }
    }
    let ctx = DetectorContext {
        oracle: oracle.as_ref().map(|o| o as _),
        embedding_stats: cal.embedding_stats.as_ref(),
        seed: cal.seed,
    };
    let series = score_series(build_detector(kind, ctx)?.as_ref(), &log)?;
    if let Some(p) = &a.emit_series {
        std::fs::write(p, series.to_csv())?;
    }
    let verdict = Verdict::from_detection(VerdictSource::for_detector(kind), detect_online(&series, cal.result.gamma), log.header.step_duration);
    let mut out = serde_json::to_value(&verdict)?;
    out["terminal_score"] = json!(series.terminal());
    out["gamma"] = serde_json::to_value(&cal.result)?["gamma"].clone();
    Ok(out)
}

pub fn eval(a: &EvalArgs) -> CliResult {
    let text = std::fs::read_to_string(&a.config).map_err(|e| CliError::new("io", format!("{}: {e}", a.config.display())))?;
    let cfg = ScenarioConfig::from_json(&text)?;
    let run = run_benchmark(&cfg)?;
    write_artifacts(&run, &a.out)?;
    let mut detectors = serde_json::Map::new();
    for (name, r) in &run.report.detectors {
        detectors.insert(name.clone(), serde_json::to_value(&r.metrics)?);
    }
    Ok(json!({
        "scenario": cfg.name,
        "out": a.out.display().to_string(),
        "detectors": detectors,
        "vlm": run.report.vlm,
        "sentinel": run.report.sentinel,
    }))
}

pub fn vlm(a: &VlmArgs) -> CliResult {
    let log = read_log(&a.log)?;
    let header = &log.header;
    let templates: Vec<TemplateId> = if a.ensemble { TemplateId::ENSEMBLE.to_vec() } else { vec![a.template.parse()?] };
    let description = match &a.task {
        Some(key) => task_description(key).ok_or_else(|| CliError::new("invalid_argument", format!("unknown task `{key}`")))?.to_string(),
        None => header.task_description.clone(),
    };
    let transport: Arc<dyn Transport> = match a.transport {
        TransportKind::Mock => {
            let dir = a.fixtures.clone().ok_or_else(|| CliError::new("invalid_argument", "--fixtures is required for the mock transport"))?;
            Arc::new(MockTransport::fixtures(dir))
        }
        TransportKind::Http => Arc::new(HttpTransport::from_env(&a.endpoint, &a.model)?),
    };
    let live = matches!(a.transport, TransportKind::Http);
    let timeout = Duration::from_secs_f64(a.timeout.max(0.001));

    let mut checkpoints = Vec::new();
    let mut first_failure = None;
    for &fraction in &a.checkpoints {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(CliError::new("invalid_argument", "checkpoints must be fractions in (0, 1]"));
        }
        let t = MockVlmConfig::checkpoint_timestep(fraction, header.episode_limit);
        let frames = frames_up_to(&log, t, live)?;
        let frames = subsample_frames(&frames, 1, a.nu)?;
        let mut responses = Vec::new();
        let mut votes = Vec::new();
        for &template in &templates {
            let auxiliary = match (template, a.auxiliary.is_empty()) {
                (TemplateId::VideoQa | TemplateId::ImageQa, _) => None,
                (_, false) => Some(a.auxiliary.clone()),
                (_, true) if !live => Some(vec!["auxiliary:example".to_string()]),
                (_, true) => return Err(CliError::new("missing_frames", "variant prompts need --auxiliary frames")),
            };
            let prompt = MonitorPrompt {
                template_id: template,
                task_description: description.clone(),
                elapsed_seconds: (t + 1) as f64 * header.step_duration,
                time_limit_seconds: header.task_time_limit,
                frames: frames.clone(),
                auxiliary_frames: auxiliary,
            };
            let outcome = query_monitor(&prompt, transport.as_ref(), timeout)?;
            votes.push(outcome.response.assessment);
            responses.push(json!({
                "template": template.name(),
                "assessment": outcome.response.assessment,
                "analysis": outcome.response.analysis,
                "latency_seconds": outcome.latency_seconds,
                "attempts": outcome.attempts,
            }));
        }
        let decision = ensemble_vote(&votes)?.decision;
        if decision == Assessment::Failure && first_failure.is_none() {
            first_failure = Some(t);
        }
        checkpoints.push(json!({ "timestep": t, "frames": frames.len(), "responses": responses, "decision": decision }));
    }
    let verdict = Verdict::from_detection(VerdictSource::Vlm, first_failure, header.step_duration);
    Ok(json!({ "checkpoints": checkpoints, "verdict": verdict }))
}

/// Frame references of records up to timestep `t`. Logs without frames get
/// placeholder references, which only the mock transport accepts.
fn frames_up_to(log: &RolloutLog, t: usize, live: bool) -> CliResult<Vec<String>> {
    let mut frames = Vec::new();
    for r in log.records.iter().filter(|r| r.timestep <= t) {
        match (&r.frame_ref, live) {
            (Some(f), true) if !Path::new(f).is_file() => return Err(CliError::new("missing_frames", format!("frame `{f}` does not exist"))),
            (Some(f), _) => frames.push(f.clone()),
            (None, true) => return Err(CliError::new("missing_frames", format!("record at t={} has no frame", r.timestep))),
            (None, false) => frames.push(format!("frame:{:05}", r.timestep)),
        }
    }
    Ok(frames)
}

/// Flattened `key: value` lines.
pub fn pretty(v: &Value) -> String {
    let mut lines = Vec::new();
    flatten("", v, &mut lines);
    let width = lines.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    lines.iter().map(|(k, v)| format!("{k:<width$}  {v}")).collect::<Vec<_>>().join("\n")
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(m) => m.iter().for_each(|(k, v)| flatten(&join(k), v, out)),
        Value::Array(a) => a.iter().enumerate().for_each(|(i, v)| flatten(&join(&i.to_string()), v, out)),
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}
