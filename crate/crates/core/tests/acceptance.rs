//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero on any failure.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{Continuous, ContinuousCDF, Normal, StudentsT};

use sentinel_core::baselines::{build_detector, ddpm_loss_score, score_series, DetectorContext, DetectorKind};
use sentinel_core::conformal::{conformal_threshold, quantile_index, EmbeddingStats};
use sentinel_core::distance::{kde_log_density, kl_forward, kl_reverse, min_l2, mmd_rbf, SampleSet};
use sentinel_core::eval::{
    calibration_rollouts, compute_metrics, run_benchmark, test_rollouts, ScenarioConfig, TestGroup, Verdict, VerdictSource,
};
use sentinel_core::policy::{Behavior, GmmMode, MeanChunk, PolicyOracle, Scene, SyntheticGmmPolicy};
use sentinel_core::rollout::{ChunkBatch, InferenceRecord, Label, Outcome, RolloutLog};
use sentinel_core::stac::{detect_online, score_rollout, DistanceKind, StacConfig};
use sentinel_core::vlm::{build_prompt, ensemble_vote, parse_response, task_description, Assessment, MonitorPrompt, TemplateId};

type Check = Result<String, String>;
type Criterion = (&'static str, Option<Duration>, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn manifest(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> SampleSet {
    SampleSet::from_flat(d, (0..n * d).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect()).unwrap()
}

fn estimator_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let n = 1 + trial % 20;
        let d = 1 + trial % 6;
        let x = random_set(&mut rng, n, d, 3.0);
        let bw = 0.1 + rng.random::<f64>() * 4.0;
        let m = mmd_rbf(&x, &x, bw).map_err(e2s)?;
        ensure(m.abs() <= 1e-12, || format!("mmd(X,X) = {m:e}"))?;
        let kf = kl_forward(&x, &x, bw).map_err(e2s)?;
        let kr = kl_reverse(&x, &x, bw).map_err(e2s)?;
        ensure(kf.abs() <= 1e-9 && kr.abs() <= 1e-9, || format!("kl(X,X) = {kf:e}, {kr:e}"))?;
        let member = x.row(rng.random_range(0..n)).to_vec();
        let l2 = min_l2(&member, &x).map_err(e2s)?;
        ensure(l2 == 0.0, || format!("min_l2 of member = {l2:e}"))?;
        worst = worst.max(m.abs()).max(kf.abs()).max(kr.abs());
    }
    Ok(format!("50 sets, max |identity| = {worst:.1e}"))
}

fn oracle_mmd(x: &SampleSet, y: &SampleSet, bw: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| (-a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / bw).exp();
    let mean = |s: &SampleSet, t: &SampleSet| {
        let mut acc = 0.0;
        for a in s.rows() {
            for b in t.rows() {
                acc += k(a, b);
            }
        }
        acc / (s.len() * t.len()) as f64
    };
    (mean(x, x) + mean(y, y) - 2.0 * mean(x, y)).max(0.0)
}

fn oracle_kde(fit: &SampleSet, q: &[f64], bw: f64) -> f64 {
    let normal = Normal::new(0.0, bw).unwrap();
    let total: f64 = fit.rows().map(|f| f.iter().zip(q).map(|(a, b)| normal.pdf(b - a)).product::<f64>()).sum();
    (total / fit.len() as f64).ln()
}

fn oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let d = rng.random_range(1..=4);
        let (nx, ny) = (rng.random_range(1..=50), rng.random_range(1..=50));
        let x = random_set(&mut rng, nx, d, 1.5);
        let y = random_set(&mut rng, ny, d, 1.5);
        let bw = 0.2 + rng.random::<f64>() * 3.0;
        let got = mmd_rbf(&x, &y, bw).map_err(e2s)?;
        let want = oracle_mmd(&x, &y, bw);
        ensure((got - want).abs() <= 1e-9, || format!("mmd {got} vs {want}"))?;
        worst = worst.max((got - want).abs());
        let kde_bw = 0.3 + rng.random::<f64>() * 2.0;
        let logs = kde_log_density(&x, &y, kde_bw).map_err(e2s)?;
        for (q, got) in y.rows().zip(logs) {
            let want = oracle_kde(&x, q, kde_bw);
            ensure((got - want).abs() <= 1e-9, || format!("kde {got} vs {want}"))?;
            worst = worst.max((got - want).abs());
        }
    }
    Ok(format!("200 instances, max abs error {worst:.1e}"))
}

fn closed_form_kl() -> Check {
    let mut worst = 0.0f64;
    for m in [0.5, 1.0, 2.0] {
        for beta in [0.5, 1.0] {
            let want = m * m / (2.0 * beta * beta);
            for d in [1, 3] {
                let a = SampleSet::from_flat(d, vec![0.25; d]).unwrap();
                let mut shifted = vec![0.25; d];
                shifted[d - 1] += m;
                let b = SampleSet::from_flat(d, shifted).unwrap();
                for got in [kl_forward(&a, &b, beta).map_err(e2s)?, kl_reverse(&a, &b, beta).map_err(e2s)?] {
                    ensure((got - want).abs() <= 1e-9, || format!("m={m} beta={beta}: {got} vs {want}"))?;
                    worst = worst.max((got - want).abs());
                }
            }
        }
    }
    Ok(format!("6 (m, beta) pairs, max abs error {worst:.1e}"))
}

fn conformal_bound() -> Check {
    const TRIALS: u64 = 500;
    let scene = Scene::default();
    let stac = StacConfig::new(DistanceKind::Mmd);
    let fprs = (0..TRIALS)
        .into_par_iter()
        .map(|trial| -> Result<f64, String> {
            let seed = 7_000_000 + trial;
            let cal = calibration_rollouts(&scene, seed, 50).map_err(e2s)?;
            let terminals = cal
                .iter()
                .map(|(_, log)| score_rollout(log, &stac).map(|s| s.terminal()))
                .collect::<Result<Vec<_>, _>>()
                .map_err(e2s)?;
            let gamma = conformal_threshold(&terminals, 0.05).map_err(e2s)?.gamma;
            let test = test_rollouts(&scene, seed, &[TestGroup { behavior: Behavior::Consistent, count: 20 }]).map_err(e2s)?;
            let mut alarms = 0;
            for t in &test {
                if detect_online(&score_rollout(&t.log, &stac).map_err(e2s)?, gamma).is_some() {
                    alarms += 1;
                }
            }
            Ok(alarms as f64 / test.len() as f64)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mean = fprs.iter().sum::<f64>() / fprs.len() as f64;
    ensure(mean <= 0.07, || format!("mean FPR {mean:.4} over {TRIALS} trials"))?;
    Ok(format!("mean FPR {mean:.4} over {TRIALS} trials (M=50, 20 test)"))
}

fn quantile_formula() -> Check {
    let idx = quantile_index(50, 0.05);
    ensure(idx == 49, || format!("rank {idx} for M=50"))?;
    let scores: Vec<f64> = (1..=50).map(f64::from).collect();
    let cal = conformal_threshold(&scores, 0.05).map_err(e2s)?;
    ensure(cal.gamma == 49.0, || format!("gamma {} for 1..=50", cal.gamma))?;
    let small = conformal_threshold(&scores[..10], 0.05).map_err(e2s)?;
    ensure(small.gamma == f64::INFINITY, || format!("gamma {} for M=10", small.gamma))?;
    Ok("M=50 -> rank 49, M=10 -> gamma=inf".into())
}

/// Random log with the chunk shape of `scene` and random mask, batch and length.
fn random_log(rng: &mut ChaCha8Rng, scene: &Scene) -> RolloutLog {
    let (h, k) = (scene.prediction_horizon, scene.execution_horizon);
    let mut header = scene.header();
    header.action_mask = loop {
        let m: Vec<bool> = (0..header.action_dim).map(|_| rng.random()).collect();
        if m.iter().any(|&b| b) {
            break m;
        }
    };
    let records = rng.random_range(2..=8);
    header.episode_limit = (records - 1) * k + h;
    header.task_time_limit = header.episode_limit as f64 * header.step_duration;
    let batch = rng.random_range(2..=8);
    let scale = if rng.random::<f64>() < 0.2 { 0.0 } else { 3.0 };
    let records = (0..records)
        .map(|j| {
            let data = (0..batch * h * header.action_dim).map(|_| scale * rng.random::<f64>()).collect();
            InferenceRecord {
                timestep: j * k,
                chunk_samples: ChunkBatch::from_flat(batch, h, header.action_dim, data).unwrap(),
                executed_index: rng.random_range(0..batch),
                embedding: Some(vec![rng.random::<f64>() * 4.0, rng.random::<f64>() * 4.0 - 2.0, if rng.random() { 1.0 } else { -1.0 }]),
                frame_ref: None,
            }
        })
        .collect();
    RolloutLog { header, records, label: Some(Label::from_return(-1.0, -2.0)) }
}

fn monotonicity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let scenes: Vec<Scene> = [(4, 1), (6, 3), (8, 4)]
        .into_iter()
        .map(|(h, k)| Scene { prediction_horizon: h, execution_horizon: k, ..Scene::default() })
        .collect();
    let oracles = scenes
        .iter()
        .map(|s| SyntheticGmmPolicy::detour(s.clone(), Behavior::Consistent, 0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(e2s)?;
    let logs: Vec<(usize, RolloutLog)> = (0..1000)
        .map(|_| {
            let s = rng.random_range(0..scenes.len());
            (s, random_log(&mut rng, &scenes[s]))
        })
        .collect();
    let stats = EmbeddingStats::fit(
        logs.iter().take(50).flat_map(|(_, l)| l.records.iter().map(|r| r.embedding.as_deref().unwrap())),
    )
    .map_err(e2s)?;
    let checked = logs
        .par_iter()
        .enumerate()
        .map(|(n, (s, log))| -> Result<usize, String> {
            log.validate().map_err(e2s)?;
            let ctx = DetectorContext { oracle: Some(&oracles[*s]), embedding_stats: Some(&stats), seed: n as u64 };
            for kind in DetectorKind::ALL {
                let series = score_series(build_detector(kind, ctx).map_err(e2s)?.as_ref(), log).map_err(e2s)?;
                ensure(series.cumulative.windows(2).all(|w| w[1] >= w[0]), || format!("{kind} decreased on log {n}"))?;
                let eta = series.terminal();
                for gamma in [eta, eta * 0.5, eta - 1e-12, eta + 1e-12, 0.0, -1.0, f64::INFINITY] {
                    let fired = detect_online(&series, gamma);
                    ensure(fired.is_some() == (eta > gamma), || format!("{kind} log {n}: gamma {gamma} vs terminal {eta}"))?;
                    if let Some(t) = fired {
                        let j = series.timesteps.iter().position(|&x| x == t).unwrap();
                        ensure(series.cumulative[j] > gamma && (j == 0 || series.cumulative[j - 1] <= gamma), || {
                            format!("{kind} log {n}: fired late or early")
                        })?;
                    }
                }
            }
            Ok(DetectorKind::ALL.len())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(format!("1000 logs x {} detectors", checked[0]))
}

fn load_config(name: &str, detectors: Vec<DetectorKind>) -> Result<ScenarioConfig, String> {
    let text = std::fs::read_to_string(manifest(&format!("../../configs/{name}"))).map_err(e2s)?;
    let mut cfg = ScenarioConfig::from_json(&text).map_err(e2s)?;
    cfg.detectors = detectors;
    Ok(cfg)
}

fn erratic_battery() -> Check {
    let cfg = load_config("erratic.json", vec![DetectorKind::StacMmd])?;
    let run = run_benchmark(&cfg).map_err(e2s)?;
    let m = &run.report.detectors["stac-mmd"].metrics;
    let (tpr, fpr) = (m.tpr.unwrap_or(0.0), m.fpr.unwrap_or(1.0));
    let eta = |o: Outcome| -> Vec<f64> {
        run.report.trajectories.iter().filter(|t| t.outcome == o).map(|t| t.terminal_scores["stac-mmd"]).collect()
    };
    let (succ, fail) = (eta(Outcome::Success), eta(Outcome::Failure));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ms = mean(&succ);
    let sd = (succ.iter().map(|x| (x - ms).powi(2)).sum::<f64>() / (succ.len() - 1) as f64).sqrt();
    let gap = mean(&fail) - ms;
    ensure(tpr >= 0.9 && fpr <= 0.1 && gap >= 3.0 * sd, || {
        format!("TPR {tpr:.3}, FPR {fpr:.3}, gap {gap:.3} vs 3sd {:.3}", 3.0 * sd)
    })?;
    Ok(format!("TPR {tpr:.3}, FPR {fpr:.3}, mean-eta gap {gap:.2} = {:.1} sd", gap / sd))
}

fn stall_battery() -> Check {
    let cfg = load_config("stall.json", vec![DetectorKind::StacMmd])?;
    let run = run_benchmark(&cfg).map_err(e2s)?;
    let stac = &run.report.detectors["stac-mmd"].metrics;
    let vlm = run.report.vlm.as_ref().ok_or("stall config has no VLM")?;
    let sentinel = &run.report.sentinel;
    let (st, vt, snt) = (stac.tpr.unwrap_or(1.0), vlm.tpr.unwrap_or(0.0), sentinel.tpr.unwrap_or(0.0));
    let summary = format!(
        "STAC TPR {st:.3}, VLM TPR {vt:.3}, sentinel TPR {snt:.3}, FP sentinel {} <= {} + {}",
        sentinel.counts.fp, stac.counts.fp, vlm.counts.fp
    );
    ensure(
        st <= 0.2 && vt >= 0.9 && snt >= 0.9 && snt >= st.max(vt) && sentinel.counts.fp <= stac.counts.fp + vlm.counts.fp,
        || summary.clone(),
    )?;
    Ok(summary)
}

fn ddpm_oracle() -> Check {
    let scene = Scene::default();
    let len = scene.prediction_horizon * scene.header().action_dim;
    let chunk: Vec<f64> = (0..len).map(|i| (i as f64 * 0.61).cos()).collect();
    let modes = vec![GmmMode { weight: 1.0, mean: MeanChunk::Constant { chunk }, stddev: 1e-13 }];
    let mut point = SyntheticGmmPolicy::new(scene.clone(), modes, Behavior::Consistent, 1).map_err(e2s)?;
    let state = [1.0, 0.5, 1.0];
    let rec = InferenceRecord {
        timestep: 0,
        chunk_samples: point.sample(&state, 16).map_err(e2s)?,
        executed_index: 0,
        embedding: Some(state.to_vec()),
        frame_ref: None,
    };
    let zero = ddpm_loss_score(&rec, &state, &point, 10, 3).map_err(e2s)?;
    ensure(zero.abs() <= 1e-10, || format!("point-mass score {zero:e}"))?;

    const DRAWS: u64 = 10_000;
    let base = SyntheticGmmPolicy::detour(scene, Behavior::Consistent, 9).map_err(e2s)?;
    let diffs = (0..DRAWS)
        .into_par_iter()
        .map(|n| -> Result<f64, String> {
            let mut p = base.clone().with_stream(n);
            let state = [2.0, 0.3, 1.0];
            let shifted = [2.0, -1.7, 1.0];
            let rec = InferenceRecord {
                timestep: 0,
                chunk_samples: p.sample(&state, 4).map_err(e2s)?,
                executed_index: 0,
                embedding: None,
                frame_ref: None,
            };
            let inside = ddpm_loss_score(&rec, &state, &p, 1, n).map_err(e2s)?;
            let outside = ddpm_loss_score(&rec, &shifted, &p, 1, n).map_err(e2s)?;
            Ok(outside - inside)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = mean / (sd / n.sqrt());
    let p = 1.0 - StudentsT::new(0.0, 1.0, n - 1.0).map_err(e2s)?.cdf(t);
    ensure(p < 0.01, || format!("paired t = {t:.2}, p = {p:.3e}"))?;
    Ok(format!("point mass {zero:.1e}; shifted minus nominal mean {mean:.3}, t = {t:.1}, p = {p:.1e}"))
}

fn vlm_pipeline() -> Check {
    let close = task_description("close").ok_or("missing task")?;
    for t in TemplateId::ALL {
        let prompt = MonitorPrompt {
            template_id: t,
            task_description: close.into(),
            elapsed_seconds: 14.6,
            time_limit_seconds: 30.0,
            frames: (0..15).map(|i| format!("frame_{i:02}.png")).collect(),
            auxiliary_frames: (!matches!(t, TemplateId::VideoQa | TemplateId::ImageQa)).then(|| vec!["aux.png".into()]),
        };
        let text = build_prompt(&prompt).map_err(e2s)?;
        let want = std::fs::read_to_string(manifest(&format!("tests/fixtures/prompts/{}.txt", t.name()))).map_err(e2s)?;
        ensure(text == want, || format!("{} differs from its fixture", t.name()))?;
    }

    let dir = |sub: &str| -> Result<Vec<PathBuf>, String> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(manifest(&format!("tests/fixtures/responses/{sub}")))
            .map_err(e2s)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(e2s)?;
        v.sort();
        Ok(v)
    };
    let good = dir("good")?;
    let bad = dir("bad")?;
    ensure(good.len() == 20 && bad.len() == 20, || format!("{} good / {} bad fixtures", good.len(), bad.len()))?;
    for p in &good {
        let name = p.file_name().unwrap().to_string_lossy().to_string();
        let want = if name.starts_with("failure") { Assessment::Failure } else { Assessment::Ok };
        let got = parse_response(&std::fs::read_to_string(p).map_err(e2s)?).map_err(|e| format!("{name}: {e}"))?;
        ensure(got.assessment == want, || format!("{name} parsed as {:?}", got.assessment))?;
    }
    for p in &bad {
        let name = p.file_name().unwrap().to_string_lossy().to_string();
        ensure(parse_response(&std::fs::read_to_string(p).map_err(e2s)?).is_err(), || format!("{name} was accepted"))?;
    }

    use Assessment::{Failure as F, Ok as O};
    let table = [
        ([O, O, O], O),
        ([O, O, F], O),
        ([O, F, O], O),
        ([F, O, O], O),
        ([O, F, F], F),
        ([F, O, F], F),
        ([F, F, O], F),
        ([F, F, F], F),
    ];
    for (votes, want) in table {
        let got = ensemble_vote(&votes).map_err(e2s)?.decision;
        ensure(got == want, || format!("{votes:?} -> {got:?}"))?;
    }
    Ok("4 templates byte-exact, 20/20 parsed, 20/20 rejected, 8/8 votes".into())
}

fn metrics_identities() -> Check {
    // verdicts, labels ('F' failure / 'S' success), then hand-counted tp, tn, fp, fn
    let cases: [(&str, &str, [usize; 4]); 10] = [
        ("FFFF", "FFFF", [4, 0, 0, 0]),
        ("SSSS", "SSSS", [0, 4, 0, 0]),
        ("FSFS", "FFSS", [1, 1, 1, 1]),
        ("FFSS", "SSFF", [0, 0, 2, 2]),
        ("FFFS", "FFSS", [2, 1, 1, 0]),
        ("FSSSS", "FFSSS", [1, 3, 0, 1]),
        ("FFFFFS", "FFFSSS", [3, 1, 2, 0]),
        ("SFSFSF", "FFFSSS", [1, 1, 2, 2]),
        ("FSSSSSSSSF", "FFSSSSSSSS", [1, 7, 1, 1]),
        ("FFFFFFFSSS", "FFFFFFFFSS", [7, 2, 0, 1]),
    ];
    for (n, (v, l, [tp, tn, fp, fn_])) in cases.iter().enumerate() {
        let verdicts: Vec<Verdict> = v
            .chars()
            .enumerate()
            .map(|(i, c)| if c == 'F' { Verdict::failure(VerdictSource::Sentinel, i, 0.5) } else { Verdict::ok(VerdictSource::Sentinel) })
            .collect();
        let labels: Vec<Outcome> = l.chars().map(|c| if c == 'F' { Outcome::Failure } else { Outcome::Success }).collect();
        let m = compute_metrics(&verdicts, &labels).map_err(e2s)?;
        let c = m.counts;
        ensure((c.tp, c.tn, c.fp, c.fn_) == (*tp, *tn, *fp, *fn_), || format!("case {n}: counts {c:?}"))?;
        let rate = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
        let (tpr, tnr) = (rate(*tp, *fn_), rate(*tn, *fp));
        ensure(m.tpr == tpr && m.tnr == tnr && m.fpr == rate(*fp, *tn), || format!("case {n}: rates {m:?}"))?;
        ensure(m.balanced_accuracy == tpr.zip(tnr).map(|(a, b)| (a + b) / 2.0), || format!("case {n}: balanced accuracy"))?;
        ensure(m.accuracy == (tp + tn) as f64 / v.len() as f64, || format!("case {n}: accuracy"))?;
    }
    Ok("10 sets match hand counts".into())
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("estimator identities", Some(Duration::from_secs(1)), estimator_identities),
        ("oracle equivalence", Some(Duration::from_secs(10)), oracle_equivalence),
        ("closed-form KL", None, closed_form_kl),
        ("conformal bound", Some(Duration::from_secs(300)), conformal_bound),
        ("quantile formula", None, quantile_formula),
        ("monotonicity", None, monotonicity),
        ("erratic battery", Some(Duration::from_secs(120)), erratic_battery),
        ("stall battery", None, stall_battery),
        ("ddpm oracle", None, ddpm_oracle),
        ("vlm pipeline", None, vlm_pipeline),
        ("metrics identities", None, metrics_identities),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let result = match (result, budget) {
            (Ok(msg), Some(b)) if elapsed > b => Err(format!("{msg}; took {elapsed:.2?} > {b:?}")),
            (r, _) => r,
        };
        match result {
            Ok(msg) => println!("PASS  {name:<22} {elapsed:>9.2?}  {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {name:<22} {elapsed:>9.2?}  {msg}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
