//! Point-mass reaching task and the multimodal demonstration sets built on it.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::policy::{ChunkSpec, ObservationHistory};

/// Observation width: position, goal, last action.
pub const OBS_DIM: usize = 6;
pub const ACTION_DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Dense,
    Sparse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub dt: f64,
    pub success_threshold: f64,
    /// Micro-step cap per episode.
    pub max_steps: usize,
    pub reward: RewardMode,
    /// Starts and goals are drawn from `[-start_box, start_box]^2`.
    pub start_box: f64,
    pub min_goal_distance: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            success_threshold: 0.05,
            max_steps: 120,
            reward: RewardMode::Sparse,
            start_box: 0.9,
            min_goal_distance: 0.5,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.success_threshold > 0.0) {
            return Err(Error::config(
                "env.dt and env.success_threshold must be > 0",
            ));
        }
        if self.max_steps == 0 {
            return Err(Error::config("env.max_steps must be >= 1"));
        }
        if !(self.start_box > 0.0 && self.start_box <= 1.0) {
            return Err(Error::config("env.start_box must lie in (0, 1]"));
        }
        if !(self.min_goal_distance >= 0.0 && self.min_goal_distance < 2.0 * self.start_box) {
            return Err(Error::config("env.min_goal_distance is unreachable"));
        }
        Ok(())
    }
}

/// Result of executing one prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub obs: ObservationHistory,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    /// Micro-steps actually applied (fewer than `H_e` if the episode ended).
    pub micro_steps: usize,
    /// Action coordinates that were clipped into `[-1, 1]`.
    pub clipped: usize,
}

/// Deterministic 2-d point mass in `[-1, 1]^2` driven by velocity commands.
#[derive(Clone, Debug)]
pub struct PointMassEnv {
    config: EnvConfig,
    history_len: usize,
    pos: [f64; 2],
    goal: [f64; 2],
    last_action: [f64; 2],
    steps: usize,
    done: bool,
    success: bool,
    history: VecDeque<[f64; OBS_DIM]>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Draws a start and goal at least `min_goal_distance` apart.
pub fn sample_task<R: Rng + ?Sized>(config: &EnvConfig, rng: &mut R) -> ([f64; 2], [f64; 2]) {
    let b = config.start_box;
    let mut draw = || [rng.random_range(-b..=b), rng.random_range(-b..=b)];
    let start = draw();
    loop {
        let goal = draw();
        if dist(start, goal) >= config.min_goal_distance {
            return (start, goal);
        }
    }
}

impl PointMassEnv {
    pub fn new(config: EnvConfig, history_len: usize) -> Result<Self> {
        config.validate()?;
        if history_len == 0 {
            return Err(Error::config("observation history must be >= 1"));
        }
        let mut env = Self {
            config,
            history_len,
            pos: [0.0; 2],
            goal: [0.0; 2],
            last_action: [0.0; 2],
            steps: 0,
            done: true,
            success: false,
            history: VecDeque::with_capacity(history_len),
        };
        env.reset_to([0.0; 2], [0.5, 0.0]);
        env.done = true;
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    /// Episode with start and goal drawn from `seed`.
    pub fn reset(&mut self, seed: u64) -> ObservationHistory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (start, goal) = sample_task(&self.config, &mut rng);
        self.reset_to(start, goal)
    }

    pub fn reset_to(&mut self, start: [f64; 2], goal: [f64; 2]) -> ObservationHistory {
        self.pos = start;
        self.goal = goal;
        self.last_action = [0.0; 2];
        self.steps = 0;
        self.done = false;
        self.success = dist(start, goal) < self.config.success_threshold;
        self.history.clear();
        let s = self.state();
        for _ in 0..self.history_len {
            self.history.push_back(s);
        }
        self.observation()
    }

    fn state(&self) -> [f64; OBS_DIM] {
        [
            self.pos[0],
            self.pos[1],
            self.goal[0],
            self.goal[1],
            self.last_action[0],
            self.last_action[1],
        ]
    }

    pub fn observation(&self) -> ObservationHistory {
        let data = self.history.iter().flatten().copied().collect();
        ObservationHistory::new(
            Tensor::new(vec![self.history_len, OBS_DIM], data).expect("history shape"),
        )
        .expect("finite state")
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    pub fn goal(&self) -> [f64; 2] {
        self.goal
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn distance(&self) -> f64 {
        dist(self.pos, self.goal)
    }

    /// One micro-step. Returns `(reward, clipped coordinates)`.
    fn micro_step(&mut self, action: [f64; 2]) -> (f64, usize) {
        let mut clipped = 0;
        let mut a = [0.0; 2];
        for m in 0..2 {
            a[m] = action[m].clamp(-1.0, 1.0);
            if a[m] != action[m] {
                clipped += 1;
            }
            self.pos[m] = (self.pos[m] + a[m] * self.config.dt).clamp(-1.0, 1.0);
        }
        self.last_action = a;
        self.steps += 1;
        self.history.pop_front();
        self.history.push_back(self.state());
        let d = self.distance();
        let reached = d < self.config.success_threshold;
        let reward = match self.config.reward {
            RewardMode::Dense => -d,
            RewardMode::Sparse if reached => 1.0,
            RewardMode::Sparse => 0.0,
        };
        if reached {
            self.success = true;
            self.done = true;
        } else if self.steps >= self.config.max_steps {
            self.done = true;
        }
        (reward, clipped)
    }

    /// Applies the `[H_e, 2]` prefix micro-step by micro-step, stopping early
    /// when the episode ends.
    pub fn step(&mut self, prefix: &Tensor) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Env("step called on a finished episode".into()));
        }
        if prefix.rank() != 2 || prefix.shape()[1] != ACTION_DIM {
            return Err(Error::Env(format!(
                "prefix must be [steps, 2], got {:?}",
                prefix.shape()
            )));
        }
        if !prefix.is_finite() {
            return Err(Error::Env("non-finite action".into()));
        }
        let mut reward = 0.0;
        let mut clipped = 0;
        let mut micro_steps = 0;
        for row in prefix.data().chunks(ACTION_DIM) {
            let (r, c) = self.micro_step([row[0], row[1]]);
            reward += r;
            clipped += c;
            micro_steps += 1;
            if self.done {
                break;
            }
        }
        if clipped > 0 {
            log::debug!("clipped {clipped} action coordinates");
        }
        Ok(StepOutcome {
            obs: self.observation(),
            reward,
            done: self.done,
            success: self.success,
            micro_steps,
            clipped,
        })
    }
}

/// Speed-limited straight-line command that lands on the goal.
pub fn scripted_action(pos: [f64; 2], goal: [f64; 2], dt: f64) -> [f64; 2] {
    let mut a = [(goal[0] - pos[0]) / dt, (goal[1] - pos[1]) / dt];
    let peak = a[0].abs().max(a[1].abs());
    if peak > 1.0 {
        a = [a[0] / peak, a[1] / peak];
    }
    a
}

/// Runs the scripted controller through `env` prefix by prefix.
/// Returns `(success, micro-steps used)`.
pub fn run_scripted(env: &mut PointMassEnv, exec_steps: usize) -> Result<(bool, usize)> {
    while !env.is_done() {
        let mut sim = (env.pos, env.goal);
        let mut data = Vec::with_capacity(exec_steps * 2);
        for _ in 0..exec_steps {
            let a = scripted_action(sim.0, sim.1, env.config.dt);
            for (x, v) in sim.0.iter_mut().zip(a) {
                *x = (*x + v * env.config.dt).clamp(-1.0, 1.0);
            }
            data.extend(a);
        }
        env.step(&Tensor::new(vec![exec_steps, 2], data)?)?;
    }
    Ok((env.success, env.steps))
}

/// Synthetic demonstration settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Number of behaviour modes `K`.
    pub modes: usize,
    /// Distinct start/goal pairs.
    pub conditions: usize,
    /// Demonstrations per condition.
    pub samples_per_condition: usize,
    /// Gaussian jitter added to every demonstrated action.
    pub noise: f64,
    /// Cruise speed of the demonstrator, in action units.
    pub speed: f64,
    /// Largest heading offset in radians; modes spread evenly over `[-bend, bend]`.
    pub bend: f64,
    /// Distance below which the heading offset fades linearly to zero.
    pub bend_radius: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            modes: 2,
            conditions: 500,
            samples_per_condition: 2,
            noise: 0.02,
            speed: 0.5,
            bend: 0.7,
            bend_radius: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes == 0 {
            return Err(Error::config("synth.modes must be >= 1"));
        }
        if self.conditions == 0 || self.samples_per_condition == 0 {
            return Err(Error::config(
                "synth needs at least one condition and sample",
            ));
        }
        if !(self.noise >= 0.0) || !(self.speed > 0.0 && self.speed <= 1.0) {
            return Err(Error::config(
                "synth.noise must be >= 0 and synth.speed in (0, 1]",
            ));
        }
        if !(self.bend.abs() < std::f64::consts::FRAC_PI_2) || !(self.bend_radius > 0.0) {
            return Err(Error::config(
                "synth.bend must lie in (-pi/2, pi/2), bend_radius > 0",
            ));
        }
        Ok(())
    }

    /// Heading offset of mode `k`.
    pub fn mode_angle(&self, k: usize) -> f64 {
        if self.modes == 1 {
            0.0
        } else {
            self.bend * (2.0 * k as f64 / (self.modes - 1) as f64 - 1.0)
        }
    }
}

/// Demonstrator command for mode `k`: head for the goal rotated by the mode
/// angle, fading near the goal, slowing to land exactly.
pub fn mode_action(
    synth: &SynthConfig,
    k: usize,
    pos: [f64; 2],
    goal: [f64; 2],
    dt: f64,
) -> [f64; 2] {
    let d = dist(pos, goal);
    if d == 0.0 {
        return [0.0; 2];
    }
    let u = [(goal[0] - pos[0]) / d, (goal[1] - pos[1]) / d];
    let angle = synth.mode_angle(k) * (d / synth.bend_radius).min(1.0);
    let (s, c) = angle.sin_cos();
    let speed = synth.speed.min(d / dt);
    [speed * (c * u[0] - s * u[1]), speed * (s * u[0] + c * u[1])]
}

/// One supervised pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub condition: usize,
    pub mode: usize,
    /// `[T_o, d_o]`
    pub obs: Tensor,
    /// `[H, d_a]`
    pub chunk: Tensor,
}

/// Episode-start observation and the noise-free chunk of every mode there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub start: [f64; 2],
    pub goal: [f64; 2],
    /// Flattened `[T_o, d_o]`.
    pub obs: Vec<f64>,
    /// `K` flattened chunks.
    pub mode_centers: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub spec: ChunkSpec,
    pub env: EnvConfig,
    pub synth: SynthConfig,
    pub seed: u64,
    pub conditions: Vec<Condition>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImitationDataset {
    pub meta: DatasetMeta,
    pub records: Vec<Record>,
}

/// Rolls a demonstrator through a fresh environment, recording the executed
/// actions and the observation history before each micro-step.
fn demonstrate<R: Rng + ?Sized>(
    synth: &SynthConfig,
    env_config: &EnvConfig,
    spec: &ChunkSpec,
    mode: usize,
    start: [f64; 2],
    goal: [f64; 2],
    jitter: Option<(&Normal<f64>, &mut R)>,
) -> Result<(Vec<[f64; 2]>, Vec<ObservationHistory>)> {
    let mut env = PointMassEnv::new(*env_config, spec.obs_history)?;
    env.reset_to(start, goal);
    let mut actions = Vec::new();
    let mut observations = Vec::new();
    let mut jitter = jitter;
    while !env.is_done() {
        observations.push(env.observation());
        let mut a = mode_action(synth, mode, env.pos, env.goal, env_config.dt);
        if let Some((normal, rng)) = jitter.as_mut() {
            for v in &mut a {
                *v = (*v + normal.sample(*rng)).clamp(-1.0, 1.0);
            }
        }
        env.step(&Tensor::new(vec![1, 2], a.to_vec())?)?;
        actions.push(env.last_action);
    }
    Ok((actions, observations))
}

/// Chunk `[a_{t-T_o+1}, .., a_{t-T_o+H}]` around decision time `t`, with
/// zeros before the episode and after it ends.
fn chunk_at(actions: &[[f64; 2]], t: usize, spec: &ChunkSpec) -> Tensor {
    let mut data = Vec::with_capacity(spec.chunk_dim());
    for h in 0..spec.horizon {
        let idx = (t + h) as isize - (spec.obs_history as isize - 1);
        let a = if idx >= 0 && (idx as usize) < actions.len() {
            actions[idx as usize]
        } else {
            [0.0; 2]
        };
        data.extend(a);
    }
    Tensor::new(vec![spec.horizon, spec.action_dim], data).expect("chunk shape")
}

/// Builds a `K`-mode demonstration set. Every episode is recorded at each
/// decision point (every `H_e` micro-steps).
pub fn synth_multimodal(
    synth: &SynthConfig,
    env_config: &EnvConfig,
    spec: &ChunkSpec,
) -> Result<ImitationDataset> {
    synth.validate()?;
    env_config.validate()?;
    spec.validate()?;
    if spec.action_dim != ACTION_DIM || spec.obs_dim != OBS_DIM {
        return Err(Error::config(format!(
            "the point-mass task needs action_dim {ACTION_DIM} and obs_dim {OBS_DIM}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(synth.seed);
    let normal = Normal::new(0.0, synth.noise).map_err(|e| Error::config(e.to_string()))?;
    let mut conditions = Vec::with_capacity(synth.conditions);
    let mut records = Vec::new();
    for c in 0..synth.conditions {
        let (start, goal) = sample_task(env_config, &mut rng);
        let mut centers = Vec::with_capacity(synth.modes);
        let mut start_obs = None;
        for k in 0..synth.modes {
            let (actions, obs) =
                demonstrate::<ChaCha8Rng>(synth, env_config, spec, k, start, goal, None)?;
            centers.push(chunk_at(&actions, 0, spec).into_data());
            start_obs.get_or_insert_with(|| obs[0].tensor().data().to_vec());
        }
        conditions.push(Condition {
            start,
            goal,
            obs: start_obs.expect("at least one mode"),
            mode_centers: centers,
        });
        for _ in 0..synth.samples_per_condition {
            let mode = rng.random_range(0..synth.modes);
            let (actions, obs) = demonstrate(
                synth,
                env_config,
                spec,
                mode,
                start,
                goal,
                Some((&normal, &mut rng)),
            )?;
            for t in (0..obs.len()).step_by(spec.exec_steps) {
                records.push(Record {
                    condition: c,
                    mode,
                    obs: obs[t].tensor().clone(),
                    chunk: chunk_at(&actions, t, spec),
                });
            }
        }
    }
    Ok(ImitationDataset {
        meta: DatasetMeta {
            spec: *spec,
            env: *env_config,
            synth: *synth,
            seed: synth.seed,
            conditions,
        },
        records,
    })
}

/// Sidecar metadata path for a dataset CSV.
pub fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

impl ImitationDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn spec(&self) -> &ChunkSpec {
        &self.meta.spec
    }

    /// Every expert chunk must stay inside `[-1, 1]`.
    pub fn validate(&self) -> Result<()> {
        let spec = &self.meta.spec;
        for (i, r) in self.records.iter().enumerate() {
            if r.obs.shape() != [spec.obs_history, spec.obs_dim]
                || r.chunk.shape() != [spec.horizon, spec.action_dim]
            {
                return Err(Error::Dataset(format!(
                    "record {i} does not match the chunk spec"
                )));
            }
            if !r.obs.is_finite() || r.chunk.data().iter().any(|v| !(v.abs() <= 1.0)) {
                return Err(Error::Dataset(format!("record {i} is out of bounds")));
            }
        }
        Ok(())
    }

    /// `[n, T_o * d_o]` observations and `[n, 1, D]` chunks for `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let spec = &self.meta.spec;
        let (f, d) = (spec.obs_features(), spec.chunk_dim());
        let mut obs = Vec::with_capacity(indices.len() * f);
        let mut chunks = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            obs.extend_from_slice(self.records[i].obs.data());
            chunks.extend_from_slice(self.records[i].chunk.data());
        }
        (
            Tensor::new(vec![indices.len(), f], obs).expect("obs shape"),
            Tensor::new(vec![indices.len(), 1, d], chunks).expect("chunk shape"),
        )
    }

    /// Writes `path` (CSV) and its JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let spec = &self.meta.spec;
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header = vec!["condition".to_string(), "mode".to_string()];
        header.extend((0..spec.obs_features()).map(|i| format!("o{i}")));
        header.extend((0..spec.chunk_dim()).map(|i| format!("x{i}")));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.condition.to_string(), r.mode.to_string()];
            row.extend(r.obs.data().iter().map(|v| v.to_string()));
            row.extend(r.chunk.data().iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let meta = meta_path(path);
        let json = serde_json::to_string_pretty(&self.meta)?;
        fs::write(&meta, json).map_err(|e| Error::io(meta, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta_file = meta_path(path);
        let text = fs::read_to_string(&meta_file).map_err(|e| Error::io(&meta_file, e))?;
        let mut meta: DatasetMeta = serde_json::from_str(&text)
            .map_err(|e| Error::Dataset(format!("{}: {e}", meta_file.display())))?;
        meta.synth.seed = meta.seed;
        let spec = meta.spec;
        spec.validate()?;
        let (f, d) = (spec.obs_features(), spec.chunk_dim());
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
        let width = reader.headers()?.len();
        if width != 2 + f + d {
            return Err(Error::Dataset(format!(
                "{} has {width} columns, the chunk spec needs {}",
                path.display(),
                2 + f + d
            )));
        }
        let mut records = Vec::new();
        for (line, row) in reader.records().enumerate() {
            let row = row?;
            let bad = |what: &str| Error::Dataset(format!("row {}: bad {what}", line + 1));
            let condition = row[0].parse().map_err(|_| bad("condition"))?;
            let mode = row[1].parse().map_err(|_| bad("mode"))?;
            let values = row
                .iter()
                .skip(2)
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("number"))?;
            records.push(Record {
                condition,
                mode,
                obs: Tensor::new(vec![spec.obs_history, spec.obs_dim], values[..f].to_vec())?,
                chunk: Tensor::new(vec![spec.horizon, spec.action_dim], values[f..].to_vec())?,
            });
        }
        let ds = Self { meta, records };
        ds.validate()?;
        Ok(ds)
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Dataset(format!("{}: {other:?}", path.display())),
    }
}

/// Mean, over the dataset's conditions, of the fraction of modes whose
/// center is nearest to at least one of `samples` generated chunks.
/// `sampler` maps a `[1, T_o * d_o]` observation and a count to `[n, D]`.
pub fn mode_coverage<F>(dataset: &ImitationDataset, samples: usize, mut sampler: F) -> Result<f64>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let conditions = &dataset.meta.conditions;
    if conditions.is_empty() {
        return Err(Error::Dataset("no mode metadata".into()));
    }
    let mut total = 0.0;
    for c in conditions {
        let obs = Tensor::new(vec![1, c.obs.len()], c.obs.clone())?;
        let chunks = sampler(&obs, samples)?;
        let k = c.mode_centers.len();
        let d = c.mode_centers[0].len();
        let mut hit = vec![false; k];
        for x in chunks.data().chunks(d) {
            let nearest = c
                .mode_centers
                .iter()
                .map(|m| m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .expect("at least one mode");
            hit[nearest] = true;
        }
        total += hit.iter().filter(|&&h| h).count() as f64 / k as f64;
    }
    Ok(total / conditions.len() as f64)
}
