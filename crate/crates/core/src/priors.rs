//! Model-free priors distilled from planner output.
//!
//! [`BcPrior`] regresses the planner's chosen actions on states.
//! [`Td3Prior`] is a twin-critic deterministic actor-critic trained
//! off-policy on every planner rollout.

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nn::{adam_step, regression_step, AdamState, Mlp, NnError};
use crate::planner::PriorPolicy;

#[derive(Debug, thiserror::Error)]
pub enum PriorError {
    #[error("policy buffer holds {have} transitions, need {need}")]
    NotEnoughData { have: usize, need: usize },
    #[error("prior training diverged (loss {0})")]
    Divergence(f64),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// One stored transition, borrowed from a [`TransitionRing`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionRef<'a> {
    pub obs: &'a [f64],
    pub action: &'a [f64],
    pub reward: f64,
    pub next_obs: &'a [f64],
}

/// Fixed-stride ring of `(obs, action, reward, next_obs)` records.
#[derive(Clone, Debug)]
pub struct TransitionRing {
    obs_dim: usize,
    action_dim: usize,
    capacity: usize,
    data: Vec<f64>,
    len: usize,
    next: usize,
}

impl TransitionRing {
    pub fn new(obs_dim: usize, action_dim: usize, capacity: usize) -> Self {
        Self {
            obs_dim,
            action_dim,
            capacity: capacity.max(1),
            data: Vec::new(),
            len: 0,
            next: 0,
        }
    }

    fn stride(&self) -> usize {
        2 * self.obs_dim + self.action_dim + 1
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, obs: &[f64], action: &[f64], reward: f64, next_obs: &[f64]) {
        let stride = self.stride();
        if self.data.len() < self.capacity * stride && self.next * stride == self.data.len() {
            self.data.resize(self.data.len() + stride, 0.0);
        }
        let rec = &mut self.data[self.next * stride..(self.next + 1) * stride];
        let (o, rest) = rec.split_at_mut(self.obs_dim);
        let (a, rest) = rest.split_at_mut(self.action_dim);
        o.copy_from_slice(obs);
        a.copy_from_slice(action);
        rest[0] = reward;
        rest[1..].copy_from_slice(next_obs);
        self.next = (self.next + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
    }

    /// Record `i`, oldest first.
    pub fn get(&self, i: usize) -> TransitionRef<'_> {
        assert!(i < self.len, "index {i} out of {}", self.len);
        let start = if self.len < self.capacity {
            0
        } else {
            self.next
        };
        let slot = (start + i) % self.capacity;
        let stride = self.stride();
        let rec = &self.data[slot * stride..(slot + 1) * stride];
        let (o, rest) = rec.split_at(self.obs_dim);
        let (a, rest) = rest.split_at(self.action_dim);
        TransitionRef {
            obs: o,
            action: a,
            reward: rest[0],
            next_obs: &rest[1..],
        }
    }
}

/// Whether a transition came from the executed plan or a sampled rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordSource {
    FinalPlan,
    Population,
}

/// Planner-generated transitions, kept in one ring per source.
#[derive(Clone, Debug)]
pub struct PolicyBuffer {
    pub final_plan: TransitionRing,
    pub population: TransitionRing,
}

impl PolicyBuffer {
    pub fn new(obs_dim: usize, action_dim: usize, capacity: usize) -> Self {
        Self {
            final_plan: TransitionRing::new(obs_dim, action_dim, capacity),
            population: TransitionRing::new(obs_dim, action_dim, capacity),
        }
    }

    pub fn push(
        &mut self,
        source: RecordSource,
        obs: &[f64],
        action: &[f64],
        reward: f64,
        next_obs: &[f64],
    ) {
        match source {
            RecordSource::FinalPlan => self.final_plan.push(obs, action, reward, next_obs),
            RecordSource::Population => self.population.push(obs, action, reward, next_obs),
        }
    }

    pub fn len(&self) -> usize {
        self.final_plan.len() + self.population.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Uniform index over both rings.
    pub fn get(&self, i: usize) -> TransitionRef<'_> {
        if i < self.final_plan.len() {
            self.final_plan.get(i)
        } else {
            self.population.get(i - self.final_plan.len())
        }
    }
}

fn mlp_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend(hidden);
    sizes.push(output);
    sizes
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BcConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch: usize,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            learning_rate: 1e-3,
            steps: 400,
            batch: 64,
        }
    }
}

/// Behavior-cloning prior: a state-to-action regressor with clamped output.
#[derive(Clone, Debug)]
pub struct BcPrior {
    pub policy: Mlp,
    adam: AdamState,
    pub action_bound: f64,
}

impl BcPrior {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_dim: usize,
        cfg: &BcConfig,
        action_bound: f64,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let policy = Mlp::new(&mlp_sizes(obs_dim, &cfg.hidden, action_dim), rng)?;
        let adam = AdamState::for_net(&policy, cfg.learning_rate);
        Ok(Self {
            policy,
            adam,
            action_bound,
        })
    }
}

impl PriorPolicy for BcPrior {
    fn act_into(&self, obs: &[f64], out: &mut [f64]) -> Result<(), NnError> {
        let a = self.policy.forward(obs)?;
        for (o, v) in out.iter_mut().zip(a) {
            *o = v.clamp(-self.action_bound, self.action_bound);
        }
        Ok(())
    }
}

/// `steps` MSE regression steps of actions on states, sampled from the
/// final-plan ring. Returns the mean loss.
pub fn bc_update<R: Rng + ?Sized>(
    prior: &mut BcPrior,
    buf: &PolicyBuffer,
    steps: usize,
    batch: usize,
    rng: &mut R,
) -> Result<f64, PriorError> {
    let ring = &buf.final_plan;
    if ring.is_empty() {
        return Err(PriorError::NotEnoughData { have: 0, need: 1 });
    }
    if steps == 0 {
        return Ok(0.0);
    }
    let obs_dim = prior.policy.input_dim();
    let act_dim = prior.policy.output_dim();
    let mut inputs = Array2::zeros((batch, obs_dim));
    let mut targets = Array2::zeros((batch, act_dim));
    let mut total = 0.0;
    for _ in 0..steps {
        for b in 0..batch {
            let tr = ring.get(rng.random_range(0..ring.len()));
            inputs
                .row_mut(b)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(tr.obs);
            targets
                .row_mut(b)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(tr.action);
        }
        let loss = regression_step(
            &mut prior.policy,
            &mut prior.adam,
            inputs.view(),
            targets.view(),
        )?;
        if !loss.is_finite() {
            return Err(PriorError::Divergence(loss));
        }
        total += loss;
    }
    Ok(total / steps as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Td3Config {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub gamma: f64,
    /// Soft target update rate.
    pub tau: f64,
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub policy_delay: u64,
    pub steps: usize,
    pub batch: usize,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            learning_rate: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            policy_noise: 0.2,
            noise_clip: 0.5,
            policy_delay: 2,
            steps: 128,
            batch: 100,
        }
    }
}

/// Twin-critic deterministic actor-critic with target networks. The actor
/// network's raw output is squashed by `bound * tanh`.
#[derive(Clone, Debug)]
pub struct Td3Prior {
    pub actor: Mlp,
    pub actor_target: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    actor_adam: AdamState,
    q1_adam: AdamState,
    q2_adam: AdamState,
    pub cfg: Td3Config,
    pub action_bound: f64,
    /// Critic steps taken so far; the actor moves on every
    /// `policy_delay`-th.
    pub total_it: u64,
}

impl Td3Prior {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_dim: usize,
        cfg: Td3Config,
        action_bound: f64,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let actor = Mlp::new(&mlp_sizes(obs_dim, &cfg.hidden, action_dim), rng)?;
        let q_sizes = mlp_sizes(obs_dim + action_dim, &cfg.hidden, 1);
        let q1 = Mlp::new(&q_sizes, rng)?;
        let q2 = Mlp::new(&q_sizes, rng)?;
        let lr = cfg.learning_rate;
        Ok(Self {
            actor_target: actor.clone(),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            actor_adam: AdamState::for_net(&actor, lr),
            q1_adam: AdamState::for_net(&q1, lr),
            q2_adam: AdamState::for_net(&q2, lr),
            actor,
            q1,
            q2,
            cfg,
            action_bound,
            total_it: 0,
        })
    }

    fn squash(&self, raw: &mut Array2<f64>) {
        let b = self.action_bound;
        raw.mapv_inplace(|x| b * x.tanh());
    }

    /// Deterministic actions for a batch of observations.
    pub fn act_batch(&self, obs: ndarray::ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        let mut a = self.actor.forward_batch(obs)?;
        self.squash(&mut a);
        Ok(a)
    }

    /// Live critic `Q1(s, a)`.
    pub fn q1_value(&self, obs: &[f64], action: &[f64]) -> Result<f64, NnError> {
        let input: Vec<f64> = obs.iter().chain(action).copied().collect();
        Ok(self.q1.forward(&input)?[0])
    }
}

impl PriorPolicy for Td3Prior {
    fn act_into(&self, obs: &[f64], out: &mut [f64]) -> Result<(), NnError> {
        let a = self.actor.forward(obs)?;
        for (o, v) in out.iter_mut().zip(a) {
            *o = self.action_bound * v.tanh();
        }
        Ok(())
    }
}

/// Twin-critic updates with target policy smoothing and delayed actor and
/// target updates. Returns the mean critic loss.
pub fn td3_update<R: Rng + ?Sized>(
    prior: &mut Td3Prior,
    buf: &PolicyBuffer,
    steps: usize,
    batch: usize,
    rng: &mut R,
) -> Result<f64, PriorError> {
    if buf.len() < batch || batch == 0 {
        return Err(PriorError::NotEnoughData {
            have: buf.len(),
            need: batch.max(1),
        });
    }
    let obs_dim = prior.actor.input_dim();
    let act_dim = prior.actor.output_dim();
    let bound = prior.action_bound;
    let cfg = prior.cfg.clone();
    let mut obs = Array2::zeros((batch, obs_dim));
    let mut next_obs = Array2::zeros((batch, obs_dim));
    let mut actions = Array2::zeros((batch, act_dim));
    let mut rewards = vec![0.0; batch];
    let mut total = 0.0;
    for _ in 0..steps {
        prior.total_it += 1;
        for b in 0..batch {
            let tr = buf.get(rng.random_range(0..buf.len()));
            obs.row_mut(b)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(tr.obs);
            next_obs
                .row_mut(b)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(tr.next_obs);
            actions
                .row_mut(b)
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(tr.action);
            rewards[b] = tr.reward;
        }

        let mut next_act = prior.actor_target.forward_batch(next_obs.view())?;
        prior.squash(&mut next_act);
        for a in next_act.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            let noise = (cfg.policy_noise * z).clamp(-cfg.noise_clip, cfg.noise_clip);
            *a = (*a + noise * bound).clamp(-bound, bound);
        }
        let next_in = ndarray::concatenate![ndarray::Axis(1), next_obs, next_act];
        let t1 = prior.q1_target.forward_batch(next_in.view())?;
        let t2 = prior.q2_target.forward_batch(next_in.view())?;
        let target: Vec<f64> = (0..batch)
            .map(|b| rewards[b] + cfg.gamma * t1[[b, 0]].min(t2[[b, 0]]))
            .collect();

        let q_in = ndarray::concatenate![ndarray::Axis(1), obs, actions];
        let mut step_loss = 0.0;
        for (q, adam) in [
            (&mut prior.q1, &mut prior.q1_adam),
            (&mut prior.q2, &mut prior.q2_adam),
        ] {
            let cache = q.forward_cached(q_in.view())?;
            let pred = cache.output();
            let mut upstream = Array2::zeros((batch, 1));
            for b in 0..batch {
                let d = pred[[b, 0]] - target[b];
                step_loss += d * d / batch as f64;
                upstream[[b, 0]] = 2.0 * d / batch as f64;
            }
            let (grad, _) = q.backward(&cache, upstream.view())?;
            adam_step(q.params_mut(), &grad, adam)?;
        }
        if !step_loss.is_finite() {
            return Err(PriorError::Divergence(step_loss));
        }
        total += step_loss;

        if prior.total_it.is_multiple_of(cfg.policy_delay.max(1)) {
            let actor_cache = prior.actor.forward_cached(obs.view())?;
            let tanh_out = actor_cache.output().mapv(f64::tanh);
            let pi = tanh_out.mapv(|x| bound * x);
            let pi_in = ndarray::concatenate![ndarray::Axis(1), obs, pi];
            let q_cache = prior.q1.forward_cached(pi_in.view())?;
            let upstream = Array2::from_elem((batch, 1), -1.0 / batch as f64);
            let (_, input_grad) = prior.q1.backward(&q_cache, upstream.view())?;
            let mut d_raw = input_grad.slice(s![.., obs_dim..]).to_owned();
            d_raw.zip_mut_with(&tanh_out, |g, &t| *g *= bound * (1.0 - t * t));
            let (grad, _) = prior.actor.backward(&actor_cache, d_raw.view())?;
            adam_step(prior.actor.params_mut(), &grad, &mut prior.actor_adam)?;

            prior.actor_target.soft_update_from(&prior.actor, cfg.tau)?;
            prior.q1_target.soft_update_from(&prior.q1, cfg.tau)?;
            prior.q2_target.soft_update_from(&prior.q2, cfg.tau)?;
        }
    }
    Ok(if steps == 0 {
        0.0
    } else {
        total / (2 * steps) as f64
    })
}
