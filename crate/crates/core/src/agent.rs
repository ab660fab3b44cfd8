//! The lifelong control loop and its baselines.
//!
//! Every mode shares one loop: propose a plan, pick a horizon, refine with
//! MPPI, act, store experience, and train value and prior networks on a
//! fixed cadence. The baselines differ only in configuration.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ensemble::{EnsembleConfig, EnsembleError, ValueBuffer, ValueEnsemble, ValueRecord};
use crate::envs::{EnvModel, LifelongEnv, World};
use crate::nn::NnError;
use crate::planner::{
    HorizonConfig, PlanError, PlanOutput, PlanRecord, PlanSource, Planner, PlannerConfig,
    PriorPolicy,
};
use crate::priors::{
    bc_update, td3_update, BcConfig, BcPrior, PolicyBuffer, PriorError, RecordSource, Td3Config,
    Td3Prior,
};
use crate::rng::{stream_rng, Stream};

/// Planner-rolled timesteps per step of the MPC-8 reference: 8 iterations
/// of 40 trajectories over 80 steps.
pub const MPC8_ROLLED_PER_STEP: u64 = 8 * 40 * 80;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid agent config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentMode {
    #[serde(rename = "aop-td3")]
    AopTd3,
    #[serde(rename = "aop-bc")]
    AopBc,
    #[serde(rename = "polo")]
    Polo,
    #[serde(rename = "mpc-8")]
    Mpc8,
    #[serde(rename = "mpc-3")]
    Mpc3,
    #[serde(rename = "td3-only")]
    Td3Only,
}

impl AgentMode {
    pub const ALL: [AgentMode; 6] = [
        AgentMode::AopTd3,
        AgentMode::AopBc,
        AgentMode::Polo,
        AgentMode::Mpc8,
        AgentMode::Mpc3,
        AgentMode::Td3Only,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AgentMode::AopTd3 => "aop-td3",
            AgentMode::AopBc => "aop-bc",
            AgentMode::Polo => "polo",
            AgentMode::Mpc8 => "mpc-8",
            AgentMode::Mpc3 => "mpc-3",
            AgentMode::Td3Only => "td3-only",
        }
    }

    pub fn uses_ensemble(self) -> bool {
        matches!(self, AgentMode::AopTd3 | AgentMode::AopBc | AgentMode::Polo)
    }

    pub fn prior_kind(self) -> PriorKind {
        match self {
            AgentMode::AopTd3 | AgentMode::Td3Only => PriorKind::Td3,
            AgentMode::AopBc => PriorKind::Bc,
            _ => PriorKind::None,
        }
    }
}

impl std::str::FromStr for AgentMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        AgentMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = AgentMode::ALL.iter().map(|m| m.name()).collect();
                format!("unknown mode {s:?}; expected one of {}", names.join(", "))
            })
    }
}

impl std::fmt::Display for AgentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorKind {
    None,
    Bc,
    Td3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub mode: AgentMode,
    pub gamma: f64,
    pub planner: PlannerConfig,
    pub horizon: HorizonConfig,
    pub ensemble: EnsembleConfig,
    pub bc: BcConfig,
    pub td3: Td3Config,
    /// Environment steps between training rounds.
    pub update_every: u64,
    pub policy_buffer_capacity: usize,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self::for_mode(AgentMode::AopBc, 0)
    }
}

impl AgentConfig {
    /// Defaults for `mode`, including the settings that turn the adaptive
    /// planner into each baseline.
    pub fn for_mode(mode: AgentMode, seed: u64) -> Self {
        let gamma = 0.99;
        let mut cfg = Self {
            mode,
            gamma,
            planner: PlannerConfig::default(),
            horizon: HorizonConfig::default(),
            ensemble: EnsembleConfig::default(),
            bc: BcConfig::default(),
            td3: Td3Config {
                gamma,
                ..Td3Config::default()
            },
            update_every: 4,
            policy_buffer_capacity: 100_000,
            seed,
        };
        let fixed = |cfg: &mut Self, iters: usize| {
            cfg.horizon.sigma_thres = 0.0;
            cfg.planner.max_iters = iters;
            cfg.planner.eps_plan = 1.0;
            cfg.planner.delta_thres_first = 0.0;
            cfg.planner.delta_thres_later = 0.0;
        };
        match mode {
            AgentMode::AopTd3 | AgentMode::AopBc => {}
            AgentMode::Polo => fixed(&mut cfg, 3),
            AgentMode::Mpc8 => fixed(&mut cfg, 8),
            AgentMode::Mpc3 => fixed(&mut cfg, 3),
            AgentMode::Td3Only => {
                fixed(&mut cfg, 1);
                cfg.planner.pop_size = 1;
                cfg.planner.noise_std = 0.2;
                cfg.planner.reuse_shifted_plan = false;
                cfg.horizon.h_full = 256;
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        self.planner.validate()?;
        self.horizon.validate()?;
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(AgentError::Config("gamma must lie in [0, 1)".into()));
        }
        if self.update_every == 0 {
            return Err(AgentError::Config("update_every must be positive".into()));
        }
        if self.mode.uses_ensemble() && self.ensemble.members == 0 {
            return Err(AgentError::Config(
                "ensemble needs at least one member".into(),
            ));
        }
        Ok(())
    }
}

#[allow(clippy::large_enum_variant)]
pub enum Prior {
    None,
    Bc(BcPrior),
    Td3(Td3Prior),
}

impl Prior {
    pub fn policy(&self) -> Option<&dyn PriorPolicy> {
        match self {
            Prior::None => None,
            Prior::Bc(p) => Some(p),
            Prior::Td3(p) => Some(p),
        }
    }
}

/// Agent state carried across the lifetime.
pub struct Agent {
    pub cfg: AgentConfig,
    pub planner: Planner,
    pub ensemble: Option<ValueEnsemble>,
    pub prior: Prior,
    pub value_buffer: ValueBuffer,
    pub policy_buffer: PolicyBuffer,
    steps: u64,
}

impl Agent {
    pub fn new(cfg: AgentConfig, obs_dim: usize, action_dim: usize) -> Result<Self, AgentError> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seed, Stream::Init, 0, 0);
        let ensemble = if cfg.mode.uses_ensemble() {
            Some(ValueEnsemble::new(
                obs_dim,
                &cfg.ensemble,
                cfg.gamma,
                &mut rng,
            )?)
        } else {
            None
        };
        let bound = cfg.planner.action_bound;
        let prior = match cfg.mode.prior_kind() {
            PriorKind::None => Prior::None,
            PriorKind::Bc => {
                Prior::Bc(BcPrior::new(obs_dim, action_dim, &cfg.bc, bound, &mut rng)?)
            }
            PriorKind::Td3 => Prior::Td3(Td3Prior::new(
                obs_dim,
                action_dim,
                cfg.td3.clone(),
                bound,
                &mut rng,
            )?),
        };
        let planner = Planner::new(
            cfg.planner.clone(),
            cfg.horizon.clone(),
            cfg.gamma,
            cfg.seed,
        )?;
        Ok(Self {
            value_buffer: ValueBuffer::new(cfg.ensemble.buffer_capacity),
            policy_buffer: PolicyBuffer::new(obs_dim, action_dim, cfg.policy_buffer_capacity),
            planner,
            ensemble,
            prior,
            steps: 0,
            cfg,
        })
    }

    /// Environment steps observed so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn prior_policy(&self) -> Option<&dyn PriorPolicy> {
        self.prior.policy()
    }

    pub fn plan<W: World>(
        &mut self,
        model: &EnvModel<W>,
        t: u64,
    ) -> Result<PlanOutput<W::State>, AgentError> {
        let keep_rollouts = matches!(self.prior, Prior::Td3(_));
        Ok(self.planner.plan_step(
            model,
            t,
            self.prior.policy(),
            self.ensemble.as_ref(),
            keep_rollouts,
        )?)
    }

    /// Store planner output and the real transition, and train when due.
    pub fn record<W: World>(
        &mut self,
        model: &EnvModel<W>,
        plan: &PlanOutput<W::State>,
        real: ValueRecord,
    ) -> Result<(), AgentError> {
        let mut obs = vec![0.0; model.obs_dim()];
        let mut next = vec![0.0; model.obs_dim()];
        let mut store = |buf: &mut PolicyBuffer, source, traj: &crate::Trajectory<W::State>| {
            for k in 0..traj.horizon() {
                model.world.observe_into(&traj.states[k], &mut obs);
                model.world.observe_into(&traj.states[k + 1], &mut next);
                buf.push(source, &obs, traj.action(k), traj.rewards[k], &next);
            }
        };
        if !matches!(self.prior, Prior::None) {
            store(&mut self.policy_buffer, RecordSource::FinalPlan, &plan.plan);
        }
        for r in &plan.rollouts {
            store(&mut self.policy_buffer, RecordSource::Population, r);
        }
        if self.ensemble.is_some() {
            self.value_buffer.push(real);
        }
        self.steps += 1;
        if self.steps.is_multiple_of(self.cfg.update_every) {
            self.train()?;
        }
        Ok(())
    }

    fn train(&mut self) -> Result<(), AgentError> {
        let mut rng = stream_rng(self.cfg.seed, Stream::Training, self.steps, 0);
        if let Some(ens) = &mut self.ensemble {
            let c = &self.cfg.ensemble;
            ens.train(&self.value_buffer, c.steps, c.batch, c.nstep, &mut rng)?;
        }
        match &mut self.prior {
            Prior::None => {}
            Prior::Bc(p) => {
                if !self.policy_buffer.final_plan.is_empty() {
                    bc_update(
                        p,
                        &self.policy_buffer,
                        self.cfg.bc.steps,
                        self.cfg.bc.batch,
                        &mut rng,
                    )?;
                }
            }
            Prior::Td3(p) => {
                if self.policy_buffer.len() >= self.cfg.td3.batch {
                    let (steps, batch) = (self.cfg.td3.steps, self.cfg.td3.batch);
                    td3_update(p, &self.policy_buffer, steps, batch, &mut rng)?;
                }
            }
        }
        Ok(())
    }
}

/// One logged environment step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u64,
    /// Observation the action was chosen from.
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub rolled_timesteps: u64,
    pub horizon: usize,
    pub iterations: usize,
    pub sigma: f64,
    pub eps: f64,
    pub source: PlanSource,
    pub world: usize,
    pub task: usize,
    /// A scheduled change took effect at the end of this step.
    pub world_changed: bool,
    pub contact: bool,
}

/// Append-only per-step log of a lifetime.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LifetimeLog {
    pub records: Vec<StepRecord>,
}

impl LifetimeLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    /// Timesteps at which a new world became active.
    pub fn change_points(&self) -> Vec<u64> {
        self.records
            .iter()
            .filter(|r| r.world_changed)
            .map(|r| r.t + 1)
            .collect()
    }
}

/// Rolled timesteps as a fraction of the MPC-8 budget.
pub fn planning_fraction(log: &LifetimeLog) -> f64 {
    let rolled: u64 = log.records.iter().map(|r| r.rolled_timesteps).sum();
    rolled as f64 / (log.len() as f64 * MPC8_ROLLED_PER_STEP as f64)
}

pub fn average_lifetime_reward(log: &LifetimeLog) -> f64 {
    log.records.iter().map(|r| r.reward).sum::<f64>() / log.len() as f64
}

/// Observer called after every environment step.
pub trait StepHook<W: World> {
    fn after_step(&mut self, env: &LifelongEnv<W>, agent: &Agent, record: &StepRecord);
}

/// Error that ended a lifetime early, with everything logged until then.
#[derive(Debug, thiserror::Error)]
#[error("lifetime aborted after {} steps: {source}", log.len())]
pub struct LifetimeError {
    pub log: LifetimeLog,
    #[source]
    pub source: AgentError,
}

/// Run `t_total` reset-free steps of `env` under `cfg`.
pub fn run_lifetime<W>(
    env: &mut LifelongEnv<W>,
    cfg: &AgentConfig,
    t_total: u64,
    mut hook: Option<&mut dyn StepHook<W>>,
) -> Result<LifetimeLog, LifetimeError>
where
    W: World + Serialize + DeserializeOwned,
{
    let mut log = LifetimeLog::default();
    let mut agent = match Agent::new(cfg.clone(), env.world().obs_dim(), env.world().action_dim()) {
        Ok(a) => a,
        Err(source) => return Err(LifetimeError { log, source }),
    };
    for _ in 0..t_total {
        match lifetime_step(env, &mut agent) {
            Ok(rec) => {
                if let Some(h) = hook.as_deref_mut() {
                    h.after_step(env, &agent, &rec);
                }
                log.records.push(rec);
            }
            Err(source) => return Err(LifetimeError { log, source }),
        }
    }
    Ok(log)
}

/// Plan, act and learn for one timestep.
pub fn lifetime_step<W: World>(
    env: &mut LifelongEnv<W>,
    agent: &mut Agent,
) -> Result<StepRecord, AgentError> {
    let t = env.clock();
    let model = env.model();
    let obs = env.observe();
    let world = env.world_index();
    let task = env.task();
    let out = agent.plan(&model, t)?;
    let step = env.step(&out.action);
    let PlanRecord {
        horizon,
        iterations,
        rolled_timesteps,
        sigma,
        eps,
        source,
        ..
    } = out.record.clone();
    let rec = StepRecord {
        t,
        obs: obs.clone(),
        action: out.action.clone(),
        reward: step.reward,
        rolled_timesteps,
        horizon,
        iterations,
        sigma,
        eps,
        source,
        world,
        task,
        world_changed: step.world_changed,
        contact: step.contact,
    };
    agent.record(
        &model,
        &out,
        ValueRecord {
            obs,
            action: out.action.clone(),
            next_obs: step.observation,
            reward: step.reward,
        },
    )?;
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{MazeParams, MazeState, MazeWorld, RewardMode, ScheduleEntry, WorldSchedule};

    fn open_env() -> LifelongEnv<MazeWorld> {
        let world = MazeWorld::open(RewardMode::Dense, &MazeParams::default());
        let schedule = WorldSchedule {
            entries: vec![ScheduleEntry {
                timestep: 0,
                task: 0,
                world,
            }],
        };
        LifelongEnv::new(schedule, MazeState::at([0.15, 0.85])).unwrap()
    }

    #[test]
    fn mode_names_round_trip() {
        for m in AgentMode::ALL {
            assert_eq!(m.name().parse::<AgentMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("mpc-5".parse::<AgentMode>().is_err());
    }

    #[test]
    fn mpc_budgets_are_constant() {
        for (mode, frac) in [(AgentMode::Mpc8, 1.0), (AgentMode::Mpc3, 0.375)] {
            let mut cfg = AgentConfig::for_mode(mode, 1);
            cfg.horizon.h_full = 80;
            let log = run_lifetime(&mut open_env(), &cfg, 5, None).unwrap();
            assert!(log.records.iter().all(|r| r.horizon == 80));
            assert_eq!(planning_fraction(&log), frac);
        }
    }

    #[test]
    fn td3_only_rolls_one_trajectory() {
        let cfg = AgentConfig::for_mode(AgentMode::Td3Only, 2);
        let log = run_lifetime(&mut open_env(), &cfg, 3, None).unwrap();
        assert!(log.records.iter().all(|r| r.rolled_timesteps == 256));
        assert!((planning_fraction(&log) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn lifetime_is_reset_free() {
        let cfg = AgentConfig::for_mode(AgentMode::AopBc, 3);
        let mut env = open_env();
        let log = run_lifetime(&mut env, &cfg, 12, None).unwrap();
        let world = env.world().clone();
        let mut s = MazeState::at([0.15, 0.85]);
        for r in &log.records {
            assert_eq!(r.obs, world.observe(&s));
            let tr = world.transition(&s, &r.action);
            assert_eq!(tr.reward, r.reward);
            s = tr.next;
        }
        assert_eq!(s, env.state());
    }

    #[test]
    fn constant_reward_average() {
        let mut log = LifetimeLog::default();
        let rec = StepRecord {
            t: 0,
            obs: vec![],
            action: vec![],
            reward: -0.25,
            rolled_timesteps: 0,
            horizon: 1,
            iterations: 1,
            sigma: 0.0,
            eps: 0.0,
            source: PlanSource::Zero,
            world: 0,
            task: 0,
            world_changed: false,
            contact: false,
        };
        log.records = vec![rec; 7];
        assert_eq!(average_lifetime_reward(&log), -0.25);
        let back = LifetimeLog::from_jsonl(&log.to_jsonl()).unwrap();
        assert_eq!(back, log);
    }
}
