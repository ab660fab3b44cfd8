//! One-dimensional velocity-tracking chain with a pseudo-terminal sink.
//!
//! The agent accelerates a particle to match a target velocity. Pushing the
//! speed past `fail_speed` drops it into a recovery phase: for
//! `recover_steps` steps actions have no effect and the reward stays below
//! the attainable optimum of zero. Target changes can be hidden
//! (changing worlds) or observed (novel states).

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use super::{
    clamp_action, EnvError, ScheduleEntry, ScheduleKind, Transition, World, WorldSchedule,
};
use crate::rng::{stream_rng, Stream};

pub const TARGET_VELOCITIES: [f64; 3] = [1.0, 2.0, 3.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkChainWorld {
    pub target_velocity: f64,
    pub observe_target: bool,
    /// Velocity change per unit action per step.
    pub accel: f64,
    pub fail_speed: f64,
    pub recover_steps: u32,
    pub dt: f64,
}

impl SinkChainWorld {
    pub fn new(target_velocity: f64, observe_target: bool) -> Self {
        Self {
            target_velocity,
            observe_target,
            accel: 0.5,
            fail_speed: 4.0,
            recover_steps: 100,
            dt: 0.1,
        }
    }

    fn sink_reward(&self) -> f64 {
        -self.target_velocity - 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkChainState {
    pub position: f64,
    pub velocity: f64,
    /// Remaining recovery steps; zero when the particle is controllable.
    pub recovering: u32,
}

impl SinkChainState {
    pub fn at_rest() -> Self {
        Self {
            position: 0.0,
            velocity: 0.0,
            recovering: 0,
        }
    }
}

impl World for SinkChainWorld {
    type State = SinkChainState;

    fn obs_dim(&self) -> usize {
        if self.observe_target {
            3
        } else {
            2
        }
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn observe_into(&self, state: &SinkChainState, out: &mut [f64]) {
        out[0] = state.velocity;
        out[1] = if state.recovering > 0 { 1.0 } else { 0.0 };
        if self.observe_target {
            out[2] = self.target_velocity;
        }
    }

    fn transition(&self, state: &SinkChainState, action: &[f64]) -> Transition<SinkChainState> {
        let mut a = [0.0];
        let clamped = clamp_action(action, 1.0, &mut a);
        let mut next = *state;
        let reward = if state.recovering > 0 {
            next.velocity = 0.0;
            next.recovering -= 1;
            self.sink_reward()
        } else {
            let v = state.velocity + self.accel * a[0];
            if v.abs() > self.fail_speed {
                next.velocity = 0.0;
                next.recovering = self.recover_steps;
                self.sink_reward()
            } else {
                next.velocity = v;
                -(v - self.target_velocity).abs()
            }
        };
        next.position += next.velocity * self.dt;
        Transition {
            next,
            reward,
            contact: false,
            clamped,
        }
    }

    fn reward_bounds(&self) -> (f64, f64) {
        let worst_tracking = -(self.fail_speed + self.target_velocity.abs());
        (worst_tracking.min(self.sink_reward()), 0.0)
    }
}

/// Target velocity schedule: each period draws a new target from
/// [`TARGET_VELOCITIES`], never repeating the previous one.
pub fn schedule_sink_chain(
    kind: ScheduleKind,
    period: u64,
    periods: usize,
    seed: u64,
) -> Result<WorldSchedule<SinkChainWorld>, EnvError> {
    if period == 0 {
        return Err(EnvError::ZeroPeriod);
    }
    let mut rng = stream_rng(seed, Stream::Schedule, 1, 0);
    let observe = kind == ScheduleKind::NovelStates;
    let mut prev = f64::NAN;
    let entries = (0..periods)
        .map(|i| {
            let choices: Vec<f64> = TARGET_VELOCITIES
                .into_iter()
                .filter(|&v| v != prev)
                .collect();
            let target = *choices.choose(&mut rng).expect("non-empty choices");
            prev = target;
            ScheduleEntry {
                timestep: i as u64 * period,
                task: TARGET_VELOCITIES.iter().position(|&v| v == target).unwrap(),
                world: SinkChainWorld::new(target, observe),
            }
        })
        .collect();
    Ok(WorldSchedule { entries })
}
