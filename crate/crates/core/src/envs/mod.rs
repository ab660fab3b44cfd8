//! Reset-free, non-stationary environments.
//!
//! A [`LifelongEnv`] owns the real state and advances it only through
//! [`LifelongEnv::step`]. Planners see the world through [`EnvModel`]
//! snapshots, which carry the current dynamics and rewards but nothing about
//! scheduled future changes.

pub mod maze;
pub mod sink_chain;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::trajectory::Trajectory;

pub use maze::{schedule_worlds, MazeParams, MazeState, MazeWorld, Rect, RewardMode};
pub use sink_chain::{schedule_sink_chain, SinkChainState, SinkChainWorld};

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("world schedule is empty")]
    EmptySchedule,
    #[error("world schedule must start at timestep 0 and be strictly increasing")]
    UnorderedSchedule,
    #[error("period must be positive")]
    ZeroPeriod,
    #[error("could not generate a connected maze after {0} attempts")]
    MazeGeneration(usize),
    #[error("schedule json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Result of one transition of the ground-truth dynamics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition<S> {
    pub next: S,
    pub reward: f64,
    pub contact: bool,
    /// The supplied action was outside the bounds and got clamped.
    pub clamped: bool,
}

/// Dynamics, reward and observation function of one world.
pub trait World: Clone + std::fmt::Debug + Send + Sync {
    type State: Copy + std::fmt::Debug + PartialEq + Send + Sync;

    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn observe_into(&self, state: &Self::State, out: &mut [f64]);
    fn transition(&self, state: &Self::State, action: &[f64]) -> Transition<Self::State>;
    /// Inclusive bounds on the per-step reward.
    fn reward_bounds(&self) -> (f64, f64);

    /// Adapt a state carried over from the previous world.
    fn reconcile(&self, state: Self::State) -> Self::State {
        state
    }

    fn observe(&self, state: &Self::State) -> Vec<f64> {
        let mut out = vec![0.0; self.obs_dim()];
        self.observe_into(state, &mut out);
        out
    }
}

/// Clamp each component of `action` to `[-bound, bound]`; returns whether
/// anything changed.
pub fn clamp_action(action: &[f64], bound: f64, out: &mut [f64]) -> bool {
    let mut clamped = false;
    for (o, &a) in out.iter_mut().zip(action) {
        let c = a.clamp(-bound, bound);
        clamped |= c != a;
        *o = c;
    }
    clamped
}

/// How scheduled changes relate to what the agent observes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// The task changes and is visible in the observation.
    NovelStates,
    /// Dynamics or task change without any observable signal.
    ChangingWorlds,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry<W> {
    pub timestep: u64,
    /// Identifier of the task; recurring tasks share an id.
    pub task: usize,
    pub world: W,
}

/// Ordered change points. Entry 0 is the world at timestep 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSchedule<W> {
    pub entries: Vec<ScheduleEntry<W>>,
}

impl<W: Serialize + DeserializeOwned> WorldSchedule<W> {
    pub fn validate(&self) -> Result<(), EnvError> {
        let first = self.entries.first().ok_or(EnvError::EmptySchedule)?;
        if first.timestep != 0
            || self
                .entries
                .windows(2)
                .any(|w| w[0].timestep >= w[1].timestep)
        {
            return Err(EnvError::UnorderedSchedule);
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let schedule: Self = serde_json::from_str(text)?;
        schedule.validate()?;
        Ok(schedule)
    }

    /// Change timesteps after the initial world.
    pub fn change_points(&self) -> Vec<u64> {
        self.entries.iter().skip(1).map(|e| e.timestep).collect()
    }
}

/// Immutable snapshot of the current world and real state.
#[derive(Clone, Debug)]
pub struct EnvModel<W: World> {
    pub world: W,
    pub state: W::State,
}

impl<W: World> EnvModel<W> {
    pub fn obs_dim(&self) -> usize {
        self.world.obs_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.world.action_dim()
    }

    pub fn observe(&self, state: &W::State) -> Vec<f64> {
        self.world.observe(state)
    }

    pub fn step(&self, state: &W::State, action: &[f64]) -> Transition<W::State> {
        self.world.transition(state, action)
    }

    /// Roll a flat action sequence (`action_dim` values per step) forward.
    pub fn rollout(&self, start: W::State, actions: &[f64]) -> Trajectory<W::State> {
        let d = self.action_dim();
        let horizon = actions.len() / d;
        let mut states = Vec::with_capacity(horizon + 1);
        let mut rewards = Vec::with_capacity(horizon);
        states.push(start);
        let mut s = start;
        for a in actions.chunks_exact(d) {
            let tr = self.world.transition(&s, a);
            s = tr.next;
            states.push(s);
            rewards.push(tr.reward);
        }
        let total = rewards.iter().sum();
        Trajectory {
            states,
            actions: actions[..horizon * d].to_vec(),
            action_dim: d,
            rewards,
            terminal_value: 0.0,
            return_estimate: total,
        }
    }
}

/// Roll `actions` through `model` starting at `start`.
pub fn model_rollout<W: World>(
    model: &EnvModel<W>,
    start: W::State,
    actions: &[f64],
) -> Trajectory<W::State> {
    model.rollout(start, actions)
}

/// What the real environment reports after one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub contact: bool,
    pub clamped: bool,
    /// A scheduled world change took effect at the new timestep.
    pub world_changed: bool,
}

/// The real, reset-free environment.
#[derive(Clone, Debug)]
pub struct LifelongEnv<W: World> {
    world: W,
    state: W::State,
    clock: u64,
    schedule: WorldSchedule<W>,
    active: usize,
}

impl<W> LifelongEnv<W>
where
    W: World + Serialize + DeserializeOwned,
{
    pub fn new(schedule: WorldSchedule<W>, initial_state: W::State) -> Result<Self, EnvError> {
        schedule.validate()?;
        let world = schedule.entries[0].world.clone();
        let state = world.reconcile(initial_state);
        Ok(Self {
            world,
            state,
            clock: 0,
            schedule,
            active: 0,
        })
    }
}

impl<W: World> LifelongEnv<W> {
    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn state(&self) -> W::State {
        self.state
    }

    pub fn world(&self) -> &W {
        &self.world
    }

    /// Index of the active schedule entry.
    pub fn world_index(&self) -> usize {
        self.active
    }

    pub fn task(&self) -> usize {
        self.schedule.entries[self.active].task
    }

    pub fn schedule(&self) -> &WorldSchedule<W> {
        &self.schedule
    }

    pub fn observe(&self) -> Vec<f64> {
        self.world.observe(&self.state)
    }

    /// Snapshot of the current world for planning.
    pub fn model(&self) -> EnvModel<W> {
        EnvModel {
            world: self.world.clone(),
            state: self.state,
        }
    }

    /// Advance one timestep. A change scheduled for the new timestep is
    /// applied before returning, so the next plan already sees it.
    pub fn step(&mut self, action: &[f64]) -> StepOutcome {
        let tr = self.world.transition(&self.state, action);
        self.state = tr.next;
        self.clock += 1;
        let mut world_changed = false;
        while let Some(next) = self.schedule.entries.get(self.active + 1) {
            if next.timestep > self.clock {
                break;
            }
            self.active += 1;
            self.world = next.world.clone();
            self.state = self.world.reconcile(self.state);
            world_changed = true;
        }
        StepOutcome {
            observation: self.world.observe(&self.state),
            reward: tr.reward,
            contact: tr.contact,
            clamped: tr.clamped,
            world_changed,
        }
    }
}
