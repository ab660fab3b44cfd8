//! Experiment specs, runs, sweeps and figure-data reports.
//!
//! A run is a pure function of its [`ExperimentSpec`] and seed: the
//! schedule, agent initialisation and every random draw derive from them.
//! Per-step logs go to JSONL; everything else is CSV computed from those
//! logs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::{
    average_lifetime_reward, planning_fraction, run_lifetime, Agent, AgentConfig, AgentMode,
    LifetimeError, LifetimeLog, StepHook, StepRecord, MPC8_ROLLED_PER_STEP,
};
use crate::envs::maze::schedule_worlds;
use crate::envs::sink_chain::schedule_sink_chain;
use crate::envs::{
    EnvError, EnvModel, LifelongEnv, MazeParams, MazeState, RewardMode, ScheduleKind,
    SinkChainState, World,
};
use crate::planner::prior_rollout;
use crate::regret::{regret_sweep, RegretSweepRow};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid spec field `{field}`: {message}")]
    InvalidSpec { field: String, message: String },
    #[error("missing logs: {0:?}")]
    MissingLogs(Vec<PathBuf>),
    #[error("mode {0} has no prior to probe")]
    NoPrior(AgentMode),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Lifetime(#[from] LifetimeError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn invalid(field: &str, message: impl Into<String>) -> HarnessError {
    HarnessError::InvalidSpec {
        field: field.to_string(),
        message: message.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Maze,
    SinkChain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub schedule: ScheduleKind,
    pub reward_mode: RewardMode,
    /// Added to the run seed to pick the schedule, so every mode run with
    /// the same seed sees the same worlds.
    pub schedule_seed: u64,
    /// Steps between world changes.
    pub period: u64,
    pub maze: MazeParams,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            kind: EnvKind::Maze,
            schedule: ScheduleKind::ChangingWorlds,
            reward_mode: RewardMode::Dense,
            schedule_seed: 0,
            period: 1000,
            maze: MazeParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    pub env: EnvSpec,
    pub mode: AgentMode,
    /// `path=value` assignments into the agent config, e.g.
    /// `planner.pop_size=20`. Values parse as JSON, falling back to strings.
    pub overrides: Vec<String>,
    pub lifetime: u64,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "run".into(),
            env: EnvSpec::default(),
            mode: AgentMode::AopBc,
            overrides: Vec::new(),
            lifetime: 10_000,
            seeds: (0..5).collect(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let spec: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." {
                "<root>".to_string()
            } else {
                path
            };
            invalid(&field, e.into_inner().to_string())
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(invalid("name", "must be a non-empty file name"));
        }
        if self.lifetime == 0 {
            return Err(invalid("lifetime", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "need at least one seed"));
        }
        if self.env.period == 0 {
            return Err(invalid("env.period", "must be positive"));
        }
        let cfg = self.agent_config(self.seeds[0])?;
        cfg.validate()
            .map_err(|e| invalid("overrides", e.to_string()))?;
        Ok(())
    }

    /// Agent config for `seed`: mode defaults plus overrides.
    pub fn agent_config(&self, seed: u64) -> Result<AgentConfig, HarnessError> {
        let base = AgentConfig::for_mode(self.mode, seed);
        apply_overrides(&base, &self.overrides)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }
}

/// Apply `path=value` assignments to a config through its JSON form.
pub fn apply_overrides<T>(base: &T, overrides: &[String]) -> Result<T, HarnessError>
where
    T: Serialize + DeserializeOwned,
{
    let mut root = serde_json::to_value(base)?;
    for ov in overrides {
        let (path, raw) = ov
            .split_once('=')
            .ok_or_else(|| invalid("overrides", format!("{ov:?} is not key=value")))?;
        let value: Value =
            serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut node = &mut root;
        for key in path.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(key))
                .ok_or_else(|| invalid("overrides", format!("unknown key {path:?}")))?;
        }
        *node = value;
    }
    serde_json::from_value(root).map_err(|e| invalid("overrides", e.to_string()))
}

/// Generic body run against whichever environment a spec describes.
pub trait EnvVisitor {
    type Output;
    fn visit<W>(self, env: LifelongEnv<W>, start: W::State) -> Self::Output
    where
        W: World + Serialize + DeserializeOwned;
}

/// Build the lifelong environment of `spec` for `seed` and hand it over.
pub fn with_env<V: EnvVisitor>(
    spec: &ExperimentSpec,
    seed: u64,
    visitor: V,
) -> Result<V::Output, HarnessError> {
    let periods = spec.lifetime.div_ceil(spec.env.period).max(1) as usize;
    let schedule_seed = spec.env.schedule_seed.wrapping_add(seed);
    Ok(match spec.env.kind {
        EnvKind::Maze => {
            let p = &spec.env.maze;
            let schedule = schedule_worlds(
                spec.env.schedule,
                spec.env.period,
                periods,
                schedule_seed,
                spec.env.reward_mode,
                p,
            )?;
            let start = MazeState::at(p.start);
            visitor.visit(LifelongEnv::new(schedule, start)?, start)
        }
        EnvKind::SinkChain => {
            let schedule =
                schedule_sink_chain(spec.env.schedule, spec.env.period, periods, schedule_seed)?;
            let start = SinkChainState::at_rest();
            visitor.visit(LifelongEnv::new(schedule, start)?, start)
        }
    })
}

struct Lifetime<'a> {
    cfg: AgentConfig,
    t_total: u64,
    probe: Option<&'a ProbeSettings>,
}

impl EnvVisitor for Lifetime<'_> {
    type Output = Result<(LifetimeLog, Vec<ProbePoint>), LifetimeError>;

    fn visit<W>(self, mut env: LifelongEnv<W>, start: W::State) -> Self::Output
    where
        W: World + Serialize + DeserializeOwned,
    {
        match self.probe {
            None => Ok((
                run_lifetime(&mut env, &self.cfg, self.t_total, None)?,
                Vec::new(),
            )),
            Some(settings) => {
                let mut probe = Probe {
                    settings,
                    start,
                    points: Vec::new(),
                };
                let log = run_lifetime(&mut env, &self.cfg, self.t_total, Some(&mut probe))?;
                Ok((log, probe.points))
            }
        }
    }
}

/// Run one seed of `spec` in memory.
pub fn run_seed(spec: &ExperimentSpec, seed: u64) -> Result<LifetimeLog, HarnessError> {
    let cfg = spec.agent_config(seed)?;
    let visitor = Lifetime {
        cfg,
        t_total: spec.lifetime,
        probe: None,
    };
    Ok(with_env(spec, seed, visitor)??.0)
}

/// Run every seed in parallel; logs come back in seed order.
pub fn run_seeds(spec: &ExperimentSpec) -> Result<Vec<LifetimeLog>, HarnessError> {
    spec.validate()?;
    spec.seeds.par_iter().map(|&s| run_seed(spec, s)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub avg_reward: f64,
    pub planning_fraction: f64,
    pub mean_horizon: f64,
    pub mean_iterations: f64,
    pub mean_sigma: f64,
    pub mean_eps: f64,
    /// Average reward within each world, in schedule order.
    pub per_world_reward: Vec<f64>,
}

/// Statistics of one log; recomputable by any reader of the JSONL.
pub fn summarize_log(seed: u64, log: &LifetimeLog) -> SeedSummary {
    let n = log.len() as f64;
    let mean = |f: &dyn Fn(&StepRecord) -> f64| log.records.iter().map(f).sum::<f64>() / n;
    let mut worlds: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in &log.records {
        let e = worlds.entry(r.world).or_default();
        e.0 += r.reward;
        e.1 += 1;
    }
    SeedSummary {
        seed,
        avg_reward: average_lifetime_reward(log),
        planning_fraction: planning_fraction(log),
        mean_horizon: mean(&|r| r.horizon as f64),
        mean_iterations: mean(&|r| r.iterations as f64),
        mean_sigma: mean(&|r| r.sigma),
        mean_eps: mean(&|r| r.eps),
        per_world_reward: worlds.values().map(|(s, c)| s / *c as f64).collect(),
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub mode: AgentMode,
    pub seeds: Vec<SeedSummary>,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub mean_planning_fraction: f64,
    pub std_planning_fraction: f64,
}

impl RunSummary {
    pub fn from_logs(spec: &ExperimentSpec, logs: &[LifetimeLog]) -> Self {
        let seeds: Vec<SeedSummary> = spec
            .seeds
            .iter()
            .zip(logs)
            .map(|(&s, l)| summarize_log(s, l))
            .collect();
        let rewards: Vec<f64> = seeds.iter().map(|s| s.avg_reward).collect();
        let fracs: Vec<f64> = seeds.iter().map(|s| s.planning_fraction).collect();
        let (mean_reward, std_reward) = mean_std(&rewards);
        let (mean_planning_fraction, std_planning_fraction) = mean_std(&fracs);
        Self {
            name: spec.name.clone(),
            mode: spec.mode,
            seeds,
            mean_reward,
            std_reward,
            mean_planning_fraction,
            std_planning_fraction,
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(io_err(path))
}

pub fn log_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed-{seed}.jsonl"))
}

/// Run `spec` and write `seed-<s>.jsonl` for every seed, `summary.csv`,
/// `per_world.csv` and `spec.json` under `output_dir/name`.
pub fn run(spec: &ExperimentSpec) -> Result<RunSummary, HarnessError> {
    let logs = run_seeds(spec)?;
    let dir = spec.run_dir();
    create_dir(&dir)?;
    for (&seed, log) in spec.seeds.iter().zip(&logs) {
        write_file(&log_path(&dir, seed), &log.to_jsonl())?;
    }
    write_file(&dir.join("spec.json"), &spec.to_json())?;
    let summary = RunSummary::from_logs(spec, &logs);
    write_summary_csv(&dir.join("summary.csv"), &summary)?;
    write_per_world_csv(&dir.join("per_world.csv"), &summary)?;
    Ok(summary)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, HarnessError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_summary_csv(path: &Path, s: &RunSummary) -> Result<(), HarnessError> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "seed",
        "avg_reward",
        "planning_fraction",
        "mean_horizon",
        "mean_iterations",
        "mean_sigma",
        "mean_eps",
    ])?;
    for r in &s.seeds {
        w.write_record([
            r.seed.to_string(),
            r.avg_reward.to_string(),
            r.planning_fraction.to_string(),
            r.mean_horizon.to_string(),
            r.mean_iterations.to_string(),
            r.mean_sigma.to_string(),
            r.mean_eps.to_string(),
        ])?;
    }
    let blank = || String::new();
    w.write_record([
        "mean".into(),
        s.mean_reward.to_string(),
        s.mean_planning_fraction.to_string(),
        blank(),
        blank(),
        blank(),
        blank(),
    ])?;
    w.write_record([
        "std".into(),
        s.std_reward.to_string(),
        s.std_planning_fraction.to_string(),
        blank(),
        blank(),
        blank(),
        blank(),
    ])?;
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn write_per_world_csv(path: &Path, s: &RunSummary) -> Result<(), HarnessError> {
    let mut w = csv_writer(path)?;
    w.write_record(["seed", "world", "avg_reward"])?;
    for r in &s.seeds {
        for (i, v) in r.per_world_reward.iter().enumerate() {
            w.write_record([r.seed.to_string(), i.to_string(), v.to_string()])?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma_thres: f64,
    pub eps_thres: f64,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub planning_fraction: f64,
}

/// One run per `(σ_thres, ε_thres)` cell, written to `sweep.csv`.
pub fn sweep_thresholds(
    base: &ExperimentSpec,
    sigma_values: &[f64],
    eps_values: &[f64],
) -> Result<Vec<SweepRow>, HarnessError> {
    if sigma_values.iter().chain(eps_values).any(|&v| !(v > 0.0)) {
        return Err(invalid("thresholds", "sweep values must be positive"));
    }
    let cells: Vec<(f64, f64)> = sigma_values
        .iter()
        .flat_map(|&s| eps_values.iter().map(move |&e| (s, e)))
        .collect();
    let rows = cells
        .iter()
        .map(|&(sigma, eps)| {
            let mut spec = base.clone();
            spec.overrides.push(format!("horizon.sigma_thres={sigma}"));
            spec.overrides.push(format!("horizon.eps_thres={eps}"));
            let logs = run_seeds(&spec)?;
            let summary = RunSummary::from_logs(&spec, &logs);
            Ok(SweepRow {
                sigma_thres: sigma,
                eps_thres: eps,
                mean_reward: summary.mean_reward,
                std_reward: summary.std_reward,
                planning_fraction: summary.mean_planning_fraction,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let dir = base.run_dir();
    create_dir(&dir)?;
    let path = dir.join("sweep.csv");
    let mut w = csv_writer(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(rows)
}

/// How often and how long the prior is evaluated on its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub every: u64,
    pub horizon: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            every: 250,
            horizon: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub seed: u64,
    pub t: u64,
    pub world: usize,
    /// Mean per-step reward of the prior alone.
    pub score: f64,
}

struct Probe<'a, S> {
    settings: &'a ProbeSettings,
    start: S,
    points: Vec<ProbePoint>,
}

impl<W: World> StepHook<W> for Probe<'_, W::State> {
    fn after_step(&mut self, env: &LifelongEnv<W>, agent: &Agent, record: &StepRecord) {
        let t = record.t + 1;
        if !t.is_multiple_of(self.settings.every) {
            return;
        }
        let Some(prior) = agent.prior_policy() else {
            return;
        };
        let model = EnvModel {
            world: env.world().clone(),
            state: self.start,
        };
        let start = model.world.reconcile(self.start);
        if let Ok(traj) = prior_rollout(prior, &model, start, self.settings.horizon) {
            self.points.push(ProbePoint {
                seed: agent.cfg.seed,
                t,
                world: env.world_index(),
                score: traj.rewards.iter().sum::<f64>() / self.settings.horizon.max(1) as f64,
            });
        }
    }
}

/// One seed with the prior probed every `settings.every` steps.
pub fn run_seed_probed(
    spec: &ExperimentSpec,
    seed: u64,
    settings: &ProbeSettings,
) -> Result<(LifetimeLog, Vec<ProbePoint>), HarnessError> {
    let visitor = Lifetime {
        cfg: spec.agent_config(seed)?,
        t_total: spec.lifetime,
        probe: Some(settings),
    };
    Ok(with_env(spec, seed, visitor)??)
}

/// Periodically roll the prior alone from the start state in a frozen copy
/// of the current world; writes `probe.csv`.
pub fn degradation_probe(
    spec: &ExperimentSpec,
    settings: &ProbeSettings,
) -> Result<Vec<ProbePoint>, HarnessError> {
    spec.validate()?;
    if spec.mode.prior_kind() == crate::agent::PriorKind::None {
        return Err(HarnessError::NoPrior(spec.mode));
    }
    let per_seed = spec
        .seeds
        .par_iter()
        .map(|&seed| Ok(run_seed_probed(spec, seed, settings)?.1))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let points: Vec<ProbePoint> = per_seed.into_iter().flatten().collect();
    let dir = spec.run_dir();
    create_dir(&dir)?;
    let path = dir.join("probe.csv");
    let mut w = csv_writer(&path)?;
    for p in &points {
        w.serialize(p)?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(points)
}

/// Trailing moving average; the first `window - 1` entries average what is
/// available.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= window {
            acc -= xs[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Timesteps at which each world (after the first) became active.
pub fn world_starts(log: &LifetimeLog) -> Vec<u64> {
    let mut starts = vec![0];
    starts.extend(log.change_points());
    starts
}

/// Per world: mean rolled timesteps in its first and last quarter.
pub fn quartile_planning(log: &LifetimeLog) -> Vec<(f64, f64)> {
    let starts = world_starts(log);
    let n = log.len() as u64;
    starts
        .iter()
        .enumerate()
        .filter_map(|(i, &a)| {
            let b = starts.get(i + 1).copied().unwrap_or(n);
            let q = (b - a) / 4;
            if q == 0 {
                return None;
            }
            let mean = |lo: u64, hi: u64| {
                log.records[lo as usize..hi as usize]
                    .iter()
                    .map(|r| r.rolled_timesteps as f64)
                    .sum::<f64>()
                    / (hi - lo) as f64
            };
            Some((mean(a, a + q), mean(b - q, b)))
        })
        .collect()
}

/// Per change point: mean ε over `window` steps after the change divided by
/// the mean over `window` steps before it. Changes without a full window on
/// both sides are skipped.
pub fn eps_spike_ratios(log: &LifetimeLog, window: usize) -> Vec<f64> {
    let eps: Vec<f64> = log.records.iter().map(|r| r.eps).collect();
    log.change_points()
        .into_iter()
        .filter_map(|c| {
            let c = c as usize;
            if c < window || c + window > eps.len() {
                return None;
            }
            let before = eps[c - window..c].iter().sum::<f64>() / window as f64;
            let after = eps[c..c + window].iter().sum::<f64>() / window as f64;
            Some(after / before.max(1e-12))
        })
        .collect()
}

/// Write figure-data CSVs for `logs` into `out_dir`:
/// `reward_curve.csv`, `traces.csv`, `planning_since_change.csv` and
/// `first_vs_last.csv`. `window` defaults to 100 steps.
pub fn report(logs: &[PathBuf], out_dir: &Path, window: Option<usize>) -> Result<(), HarnessError> {
    let missing: Vec<PathBuf> = logs.iter().filter(|p| !p.is_file()).cloned().collect();
    if !missing.is_empty() || logs.is_empty() {
        return Err(HarnessError::MissingLogs(missing));
    }
    let window = window.unwrap_or(100);
    create_dir(out_dir)?;
    let mut curve = csv_writer(&out_dir.join("reward_curve.csv"))?;
    curve.write_record(["log", "t", "reward_ma"])?;
    let mut traces = csv_writer(&out_dir.join("traces.csv"))?;
    traces.write_record([
        "log",
        "t",
        "sigma",
        "eps",
        "horizon",
        "iterations",
        "rolled_timesteps",
        "world",
        "world_change",
    ])?;
    let mut since: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    let mut occurrences: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for path in logs {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let log = LifetimeLog::from_jsonl(&text)?;
        let name = path.display().to_string();
        let rewards: Vec<f64> = log.records.iter().map(|r| r.reward).collect();
        for (r, ma) in log.records.iter().zip(moving_average(&rewards, window)) {
            curve.write_record([name.clone(), r.t.to_string(), ma.to_string()])?;
        }
        let starts = world_starts(&log);
        let mut next_change = 1;
        let mut last_start = 0;
        let mut occ_sum = 0.0;
        let mut occ_len = 0usize;
        for (i, r) in log.records.iter().enumerate() {
            let change = starts.get(next_change) == Some(&r.t);
            if change {
                occurrences
                    .entry(log.records[i - 1].task)
                    .or_default()
                    .push(occ_sum / occ_len.max(1) as f64);
                occ_sum = 0.0;
                occ_len = 0;
                last_start = r.t;
                next_change += 1;
            }
            occ_sum += r.eps;
            occ_len += 1;
            traces.write_record([
                name.clone(),
                r.t.to_string(),
                r.sigma.to_string(),
                r.eps.to_string(),
                r.horizon.to_string(),
                r.iterations.to_string(),
                r.rolled_timesteps.to_string(),
                r.world.to_string(),
                u8::from(change).to_string(),
            ])?;
            let e = since.entry(r.t - last_start).or_default();
            e.0 += r.rolled_timesteps as f64;
            e.1 += r.iterations as f64;
            e.2 += 1;
        }
        if let Some(last) = log.records.last() {
            occurrences
                .entry(last.task)
                .or_default()
                .push(occ_sum / occ_len.max(1) as f64);
        }
    }
    curve.flush().map_err(io_err(out_dir))?;
    traces.flush().map_err(io_err(out_dir))?;

    let mut w = csv_writer(&out_dir.join("planning_since_change.csv"))?;
    w.write_record([
        "steps_since_change",
        "mean_rolled_timesteps",
        "mean_iterations",
        "fraction_of_mpc8",
    ])?;
    for (k, (rolled, iters, n)) in &since {
        let n = *n as f64;
        w.write_record([
            k.to_string(),
            (rolled / n).to_string(),
            (iters / n).to_string(),
            (rolled / n / MPC8_ROLLED_PER_STEP as f64).to_string(),
        ])?;
    }
    w.flush().map_err(io_err(out_dir))?;

    let mut w = csv_writer(&out_dir.join("first_vs_last.csv"))?;
    w.write_record(["task", "occurrences", "first_mean_eps", "last_mean_eps"])?;
    for (task, eps) in &occurrences {
        w.write_record([
            task.to_string(),
            eps.len().to_string(),
            eps[0].to_string(),
            eps[eps.len() - 1].to_string(),
        ])?;
    }
    w.flush().map_err(io_err(out_dir))?;
    Ok(())
}

/// Run the regret sweep and write it to `path` as CSV.
pub fn regret_sweep_csv(
    instances: usize,
    base_seed: u64,
    path: &Path,
) -> Result<Vec<RegretSweepRow>, HarnessError> {
    let rows = regret_sweep(instances, base_seed);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut w = csv_writer(path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(rows)
}
