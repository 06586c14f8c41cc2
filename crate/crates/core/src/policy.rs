//! Policy oracle interface and a synthetic Gaussian-mixture action-chunk policy.
//!
//! The synthetic policy drives a planar point robot around a wall toward a
//! goal. Its state is `[x, y, c]`, where `c = ±1` is a per-episode context
//! that tilts the preference between the two detour modes (left or right of
//! the wall). Because every mode is Gaussian, the noise-prediction oracle is
//! available in closed form.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};
use crate::rollout::{ChunkBatch, InferenceRecord, Label, RolloutHeader, RolloutLog, FORMAT_VERSION};

/// Cumulative signal levels `alpha_bar[i]`; index 0 is the least noisy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(100, 0.9999, 0.02).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn new(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(invalid("noise schedule needs at least one step"));
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(invalid("alpha_bar values must lie in (0, 1)"));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid("alpha_bar must be strictly decreasing"));
        }
        Ok(Self { alpha_bar })
    }

    /// `n` values evenly spaced from `first` down to `last`.
    pub fn linear(n: usize, first: f64, last: f64) -> Result<Self> {
        if n < 2 {
            return Err(invalid("linear schedule needs at least two steps"));
        }
        let step = (first - last) / (n - 1) as f64;
        Self::new((0..n).map(|i| first - step * i as f64).collect())
    }

    pub fn n_steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, i: usize) -> f64 {
        self.alpha_bar[i]
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, i: usize) -> Result<()> {
        if i < self.n_steps() {
            Ok(())
        } else {
            Err(invalid(format!("diffusion step {i} outside [0, {})", self.n_steps())))
        }
    }

    /// Forward process: `sqrt(ab) * a0 + sqrt(1 - ab) * eps`.
    pub fn noise(&self, a0: &[f64], eps: &[f64], i: usize) -> Result<Vec<f64>> {
        self.check_step(i)?;
        check_dim(a0.len(), eps.len())?;
        let ab = self.alpha_bar[i];
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(a0.iter().zip(eps).map(|(a, e)| s * a + n * e).collect())
    }

    /// Clean-sample estimate implied by a noise prediction at step `i`.
    pub fn predict_x0(&self, x: &[f64], eps_hat: &[f64], i: usize) -> Result<Vec<f64>> {
        self.check_step(i)?;
        check_dim(x.len(), eps_hat.len())?;
        let ab = self.alpha_bar[i];
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x.iter().zip(eps_hat).map(|(x, e)| (x - n * e) / s).collect())
    }

    /// Deterministic reverse update from step `i` to `i - 1` (`i >= 1`).
    pub fn reverse_step(&self, x: &[f64], eps_hat: &[f64], i: usize) -> Result<Vec<f64>> {
        self.check_step(i)?;
        if i == 0 {
            return Err(invalid("reverse_step needs i >= 1; use predict_x0 at step 0"));
        }
        check_dim(x.len(), eps_hat.len())?;
        let ab = self.alpha_bar[i];
        let alpha = ab / self.alpha_bar[i - 1];
        let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
        let scale = alpha.sqrt();
        Ok(x.iter().zip(eps_hat).map(|(x, e)| (x - coef * e) / scale).collect())
    }
}

/// A stochastic action-chunk policy with access to its noise predictor.
pub trait PolicyOracle {
    /// `(prediction_horizon, action_dim)`.
    fn chunk_shape(&self) -> (usize, usize);
    fn schedule(&self) -> &NoiseSchedule;
    fn sample(&mut self, state: &[f64], batch: usize) -> Result<ChunkBatch>;
    /// Predicted noise for a flattened noised chunk at diffusion step `i`.
    fn eps(&self, noised: &[f64], state: &[f64], i: usize) -> Result<Vec<f64>>;
    fn encode(&self, observation: &[f64]) -> Vec<f64>;
}

/// Reconstructs a chunk from `noised` at step `depth` by running the reverse
/// process to step 0 without injected noise.
pub fn reconstruct<P: PolicyOracle + ?Sized>(oracle: &P, noised: &[f64], state: &[f64], depth: usize) -> Result<Vec<f64>> {
    let mut x = noised.to_vec();
    for i in (1..=depth).rev() {
        let e = oracle.eps(&x, state, i)?;
        x = oracle.schedule().reverse_step(&x, &e, i)?;
    }
    let e = oracle.eps(&x, state, 0)?;
    oracle.schedule().predict_x0(&x, &e, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Consistent,
    ModeResample,
    ConstantStall,
    Drift,
}

impl Behavior {
    pub const ALL: [Behavior; 4] = [Self::Consistent, Self::ModeResample, Self::ConstantStall, Self::Drift];

    pub fn name(self) -> &'static str {
        match self {
            Self::Consistent => "consistent",
            Self::ModeResample => "mode_resample",
            Self::ConstantStall => "constant_stall",
            Self::Drift => "drift",
        }
    }
}

impl std::str::FromStr for Behavior {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| invalid(format!("unknown behavior `{s}`")))
    }
}

/// Environment and policy parameters of the synthetic navigation scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scene {
    pub goal_x: f64,
    pub goal_radius: f64,
    pub detour_amplitude: f64,
    pub wall_x: f64,
    pub wall_half_width: f64,
    pub speed: f64,
    pub lateral_gain: f64,
    pub forward_gain: f64,
    pub step_duration: f64,
    pub prediction_horizon: usize,
    pub execution_horizon: usize,
    pub episode_limit: usize,
    pub batch: usize,
    pub mode_stddev: f64,
    /// Probability mass on the mode matching the episode context.
    pub commitment: f64,
    pub start_y_stddev: f64,
    pub stall_stddev: f64,
    pub task_description: String,
}

impl Default for Scene {
    fn default() -> Self {
        Self {
            goal_x: 10.0,
            goal_radius: 1.0,
            detour_amplitude: 2.5,
            wall_x: 5.0,
            wall_half_width: 1.5,
            speed: 2.0,
            lateral_gain: 4.0,
            forward_gain: 1.0,
            step_duration: 0.1,
            prediction_horizon: 8,
            execution_horizon: 4,
            episode_limit: 80,
            batch: 32,
            mode_stddev: 0.05,
            commitment: 0.95,
            start_y_stddev: 0.1,
            stall_stddev: 1e-3,
            task_description: "drive around the wall and stop at the goal marker".into(),
        }
    }
}

/// Actions are `(vx, vy, gripper)`; the gripper channel is excluded from distances.
pub const ACTION_DIM: usize = 3;
pub const ACTION_MASK: [bool; ACTION_DIM] = [true, true, false];
/// `[x, y, context]`.
pub const STATE_DIM: usize = 3;

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("goal_x", self.goal_x),
            ("goal_radius", self.goal_radius),
            ("detour_amplitude", self.detour_amplitude),
            ("wall_x", self.wall_x),
            ("wall_half_width", self.wall_half_width),
            ("speed", self.speed),
            ("lateral_gain", self.lateral_gain),
            ("forward_gain", self.forward_gain),
            ("step_duration", self.step_duration),
            ("mode_stddev", self.mode_stddev),
            ("stall_stddev", self.stall_stddev),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("scene.{name} must be positive and finite")));
            }
        }
        if !(self.start_y_stddev.is_finite() && self.start_y_stddev >= 0.0) {
            return Err(invalid("scene.start_y_stddev must be nonnegative"));
        }
        if !(self.commitment > 0.0 && self.commitment < 1.0) {
            return Err(invalid("scene.commitment must lie in (0, 1)"));
        }
        if self.batch == 0 {
            return Err(invalid("scene.batch must be at least 1"));
        }
        self.header().validate()
    }

    pub fn header(&self) -> RolloutHeader {
        RolloutHeader {
            format_version: FORMAT_VERSION,
            action_dim: ACTION_DIM,
            prediction_horizon: self.prediction_horizon,
            execution_horizon: self.execution_horizon,
            episode_limit: self.episode_limit,
            step_duration: self.step_duration,
            action_mask: ACTION_MASK.to_vec(),
            task_description: self.task_description.clone(),
            task_time_limit: self.episode_limit as f64 * self.step_duration,
        }
    }

    fn detour_velocity(&self, x: f64, y: f64, side: f64) -> (f64, f64) {
        let progress = (x / self.goal_x).clamp(0.0, 1.0);
        let target_y = side * self.detour_amplitude * (std::f64::consts::PI * progress).sin();
        let vy = (self.lateral_gain * (target_y - y)).clamp(-self.speed, self.speed);
        let vx = (self.forward_gain * (self.goal_x - x)).clamp(-1.0, 1.0) * (self.speed * self.speed - vy * vy).sqrt();
        (vx, vy)
    }

    /// Open-loop plan of `prediction_horizon` actions for one detour side.
    pub fn detour_plan(&self, state: &[f64], side: f64) -> Vec<f64> {
        let (mut x, mut y) = (state[0], state[1]);
        let mut out = Vec::with_capacity(self.prediction_horizon * ACTION_DIM);
        for _ in 0..self.prediction_horizon {
            let (vx, vy) = self.detour_velocity(x, y, side);
            out.extend_from_slice(&[vx, vy, 0.0]);
            x += vx * self.step_duration;
            y += vy * self.step_duration;
        }
        out
    }

    /// Applies one action; returns `None` when the move hits the wall.
    fn step(&self, x: f64, y: f64, action: &[f64]) -> Option<(f64, f64)> {
        let nx = x + action[0] * self.step_duration;
        let ny = y + action[1] * self.step_duration;
        if x < self.wall_x && nx >= self.wall_x && ny.abs() < self.wall_half_width {
            None
        } else {
            Some((nx, ny))
        }
    }

    pub fn distance_to_goal(&self, x: f64, y: f64) -> f64 {
        (x - self.goal_x).hypot(y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanChunk {
    /// State-dependent detour plan passing the wall on `side` (+1 or -1).
    Detour { side: f64 },
    /// Flattened `h x action_dim` chunk independent of state.
    Constant { chunk: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmMode {
    pub weight: f64,
    pub mean: MeanChunk,
    pub stddev: f64,
}

/// A mixture component resolved at a particular state.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub stddev: f64,
}

/// Draws `batch` chunks from a resolved mixture.
pub fn gmm_sample<R: Rng + ?Sized>(
    components: &[Component],
    batch: usize,
    horizon: usize,
    action_dim: usize,
    rng: &mut R,
) -> Result<ChunkBatch> {
    if batch == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    let len = horizon * action_dim;
    let mut data = Vec::with_capacity(batch * len);
    for _ in 0..batch {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = components.len() - 1;
        for (m, c) in components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                chosen = m;
                break;
            }
        }
        let c = &components[chosen];
        check_dim(len, c.mean.len())?;
        data.extend(c.mean.iter().map(|mu| mu + c.stddev * rng.sample::<f64, _>(StandardNormal)));
    }
    ChunkBatch::from_flat(batch, horizon, action_dim, data)
}

/// Bayes-optimal noise prediction for `x = sqrt(ab) a0 + sqrt(1 - ab) eps`
/// with `a0` drawn from the isotropic mixture `components`.
pub fn gmm_exact_eps(components: &[Component], x: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    if components.is_empty() {
        return Err(invalid("mixture has no components"));
    }
    let d = x.len();
    let s = alpha_bar.sqrt();
    let mut log_r = Vec::with_capacity(components.len());
    let mut gains = Vec::with_capacity(components.len());
    for c in components {
        check_dim(d, c.mean.len())?;
        let var0 = c.stddev * c.stddev;
        let v = alpha_bar * var0 + 1.0 - alpha_bar;
        let sq: f64 = x.iter().zip(&c.mean).map(|(x, m)| (x - s * m).powi(2)).sum();
        log_r.push(c.weight.ln() - 0.5 * d as f64 * v.ln() - 0.5 * sq / v);
        gains.push(s * var0 / v);
    }
    let max = log_r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let r: Vec<f64> = log_r.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = r.iter().sum();
    let mut post = vec![0.0; d];
    for ((c, ri), g) in components.iter().zip(&r).zip(&gains) {
        let w = ri / total;
        for j in 0..d {
            post[j] += w * (c.mean[j] + g * (x[j] - s * c.mean[j]));
        }
    }
    let n = (1.0 - alpha_bar).sqrt();
    Ok(x.iter().zip(&post).map(|(x, p)| (x - s * p) / n).collect())
}

#[derive(Debug, Clone)]
pub struct SyntheticGmmPolicy {
    scene: Scene,
    modes: Vec<GmmMode>,
    behavior: Behavior,
    schedule: NoiseSchedule,
    rng: ChaCha8Rng,
}

impl SyntheticGmmPolicy {
    pub fn new(scene: Scene, modes: Vec<GmmMode>, behavior: Behavior, seed: u64) -> Result<Self> {
        scene.validate()?;
        if modes.is_empty() {
            return Err(invalid("policy needs at least one mode"));
        }
        let chunk_len = scene.prediction_horizon * ACTION_DIM;
        for m in &modes {
            if !(m.weight > 0.0 && m.weight.is_finite()) {
                return Err(invalid("mode weights must be positive"));
            }
            if !(m.stddev > 0.0 && m.stddev.is_finite()) {
                return Err(invalid("mode stddev must be positive"));
            }
            if let MeanChunk::Constant { chunk } = &m.mean {
                check_dim(chunk_len, chunk.len())?;
                if chunk.iter().any(|v| !v.is_finite()) {
                    return Err(invalid("mode mean must be finite"));
                }
            }
        }
        let total: f64 = modes.iter().map(|m| m.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("mode weights must sum to 1, got {total}")));
        }
        Ok(Self { scene, modes, behavior, schedule: NoiseSchedule::default(), rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    /// The default two-mode detour policy.
    pub fn detour(scene: Scene, behavior: Behavior, seed: u64) -> Result<Self> {
        let sd = scene.mode_stddev;
        let modes = [1.0, -1.0]
            .into_iter()
            .map(|side| GmmMode { weight: 0.5, mean: MeanChunk::Detour { side }, stddev: sd })
            .collect();
        Self::new(scene, modes, behavior, seed)
    }

    /// Selects an independent random stream, e.g. one per trajectory index.
    pub fn with_stream(mut self, stream: u64) -> Self {
        self.rng.set_stream(stream);
        self
    }

    pub fn with_schedule(mut self, schedule: NoiseSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn behavior(&self) -> Behavior {
        self.behavior
    }

    fn tilt(&self) -> f64 {
        0.5 * (self.scene.commitment / (1.0 - self.scene.commitment)).ln()
    }

    /// Nominal mixture at `state`, with detour weights tilted toward the context.
    pub fn components(&self, state: &[f64]) -> Result<Vec<Component>> {
        self.components_with_context(state, state.get(2).copied().unwrap_or(0.0))
    }

    fn components_with_context(&self, state: &[f64], context: f64) -> Result<Vec<Component>> {
        if state.len() < 2 {
            return Err(invalid("state needs at least x and y"));
        }
        let kappa = self.tilt();
        let mut comps: Vec<Component> = self
            .modes
            .iter()
            .map(|m| {
                let (mean, side) = match &m.mean {
                    MeanChunk::Detour { side } => (self.scene.detour_plan(state, *side), *side),
                    MeanChunk::Constant { chunk } => (chunk.clone(), 0.0),
                };
                Component { weight: m.weight * (kappa * side * context).exp(), mean, stddev: m.stddev }
            })
            .collect();
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        for c in &mut comps {
            c.weight /= total;
        }
        Ok(comps)
    }

    fn behavior_components(&mut self, state: &[f64]) -> Result<Vec<Component>> {
        let len = self.scene.prediction_horizon * ACTION_DIM;
        match self.behavior {
            Behavior::Consistent => self.components(state),
            Behavior::ModeResample => {
                let context = if self.rng.random::<bool>() { 1.0 } else { -1.0 };
                self.components_with_context(state, context)
            }
            Behavior::ConstantStall => {
                Ok(vec![Component { weight: 1.0, mean: vec![0.0; len], stddev: self.scene.stall_stddev }])
            }
            Behavior::Drift => {
                let mut mean = vec![0.0; len];
                for step in mean.chunks_mut(ACTION_DIM) {
                    step[1] = self.scene.speed;
                }
                Ok(vec![Component { weight: 1.0, mean, stddev: self.scene.mode_stddev }])
            }
        }
    }
}

impl PolicyOracle for SyntheticGmmPolicy {
    fn chunk_shape(&self) -> (usize, usize) {
        (self.scene.prediction_horizon, ACTION_DIM)
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn sample(&mut self, state: &[f64], batch: usize) -> Result<ChunkBatch> {
        let comps = self.behavior_components(state)?;
        let (h, d) = self.chunk_shape();
        gmm_sample(&comps, batch, h, d, &mut self.rng)
    }

    /// Always the nominal (consistent) mixture, whatever the sampling behavior.
    fn eps(&self, noised: &[f64], state: &[f64], i: usize) -> Result<Vec<f64>> {
        self.schedule.check_step(i)?;
        let (h, d) = self.chunk_shape();
        check_dim(h * d, noised.len())?;
        gmm_exact_eps(&self.components(state)?, noised, self.schedule.alpha_bar(i))
    }

    fn encode(&self, observation: &[f64]) -> Vec<f64> {
        observation.to_vec()
    }
}

/// Outcome rule applied to the terminal state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelRule {
    /// Return is minus the distance to the goal; success within `radius`.
    GoalBall { radius: f64 },
}

impl LabelRule {
    pub fn label(&self, scene: &Scene, terminal: (f64, f64)) -> Label {
        match *self {
            LabelRule::GoalBall { radius } => Label::from_return(-scene.distance_to_goal(terminal.0, terminal.1), -radius),
        }
    }
}

/// Closed-loop episode: sample a batch every `k` steps, execute the first `k`
/// actions of one randomly chosen chunk, and label the terminal state.
pub fn generate_rollout(policy: &mut SyntheticGmmPolicy, rule: &LabelRule) -> Result<RolloutLog> {
    let scene = policy.scene.clone();
    let header = scene.header();
    let k = scene.execution_horizon;
    let context = if policy.rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut x = 0.0;
    let mut y = scene.start_y_stddev * policy.rng.sample::<f64, _>(StandardNormal);
    let mut crashed = false;
    let mut records = Vec::new();
    let mut t = 0;
    while t < scene.episode_limit {
        let state = [x, y, context];
        let chunks = policy.sample(&state, scene.batch)?;
        let executed_index = policy.rng.random_range(0..scene.batch);
        for step in 0..k.min(scene.episode_limit - t) {
            if crashed {
                break;
            }
            let a = &chunks.chunk(executed_index)[step * ACTION_DIM..(step + 1) * ACTION_DIM];
            match scene.step(x, y, a) {
                Some((nx, ny)) => (x, y) = (nx, ny),
                None => crashed = true,
            }
        }
        records.push(InferenceRecord {
            timestep: t,
            chunk_samples: chunks,
            executed_index,
            embedding: Some(policy.encode(&state)),
            frame_ref: None,
        });
        t += k;
    }
    let log = RolloutLog { header, records, label: Some(rule.label(&scene, (x, y))) };
    log.validate()?;
    Ok(log)
}

/// Per-trajectory policy with its random stream derived from `(seed, index)`.
pub fn trajectory_policy(scene: &Scene, behavior: Behavior, seed: u64, index: u64) -> Result<SyntheticGmmPolicy> {
    Ok(SyntheticGmmPolicy::detour(scene.clone(), behavior, seed)?.with_stream(index))
}
