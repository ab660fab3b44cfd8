//! MPPI planning with a terminal value, adaptive horizon and stochastic
//! early termination.
//!
//! Each timestep the planner compares a rollout of the prior policy with the
//! previous plan advanced by one step, picks a horizon from the value
//! ensemble's uncertainty, and refines the first `H_t` actions with MPPI
//! until the relative improvement stalls.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{EnsembleError, ValueEnsemble};
use crate::envs::{EnvModel, World};
use crate::nn::NnError;
use crate::rng::{pack, stream_rng, Stream};
use crate::trajectory::Trajectory;

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("invalid planner config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// MPPI temperature λ.
    pub lambda: f64,
    pub noise_std: f64,
    pub pop_size: usize,
    pub max_iters: usize,
    pub delta_thres_first: f64,
    pub delta_thres_later: f64,
    /// Probability of continuing to plan once improvement has stalled.
    pub eps_plan: f64,
    pub action_bound: f64,
    /// Consider the previous plan, advanced one step, as a starting point.
    pub reuse_shifted_plan: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            noise_std: 0.1,
            pop_size: 40,
            max_iters: 8,
            delta_thres_first: 0.01,
            delta_thres_later: 0.05,
            eps_plan: 0.2,
            action_bound: 1.0,
            reuse_shifted_plan: true,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: &str| Err(PlanError::Config(m.to_string()));
        if !(self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative");
        }
        if self.pop_size == 0 || self.max_iters == 0 {
            return bad("pop_size and max_iters must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.eps_plan) {
            return bad("eps_plan must lie in [0, 1]");
        }
        if !(self.action_bound > 0.0) {
            return bad("action_bound must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HorizonConfig {
    pub h_full: usize,
    pub h_min: usize,
    pub sigma_thres: f64,
    pub eps_thres: f64,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self {
            h_full: 80,
            h_min: 1,
            sigma_thres: 8.0,
            eps_thres: 25.0,
        }
    }
}

impl HorizonConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.h_min < 1 || self.h_min > self.h_full {
            return Err(PlanError::Config("need 1 <= h_min <= h_full".into()));
        }
        Ok(())
    }
}

/// Softmax of `returns / lambda`, stabilised by subtracting the maximum.
pub fn softmax_weights(returns: &[f64], lambda: f64) -> Vec<f64> {
    let max = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = returns
        .iter()
        .map(|&j| ((j - max) / lambda).exp())
        .collect();
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    w
}

/// Relative improvement `(next - prev) / |prev|`. The flag is set when
/// `|prev|` was below `1e-8` and the denominator got floored.
pub fn improvement(prev: f64, next: f64) -> (f64, bool) {
    let denom = prev.abs();
    let floored = denom < 1e-8;
    ((next - prev) / denom.max(1e-8), floored)
}

/// Stop planning when the improvement of iteration `iter` (1-based) fell
/// below its threshold, unless a continue coin with probability `eps_plan`
/// says otherwise.
pub fn should_terminate<R: Rng + ?Sized>(
    delta: f64,
    iter: usize,
    cfg: &PlannerConfig,
    rng: &mut R,
) -> bool {
    let thres = if iter <= 1 {
        cfg.delta_thres_first
    } else {
        cfg.delta_thres_later
    };
    delta < thres && rng.random::<f64>() >= cfg.eps_plan
}

/// Horizon rule. `eps[h]` is the Bellman error of horizon `h` for
/// `h in 0..=h_full`.
pub fn choose_horizon(sigma: f64, eps: &[f64], hcfg: &HorizonConfig) -> usize {
    if sigma >= hcfg.sigma_thres {
        return hcfg.h_full;
    }
    (hcfg.h_min..=hcfg.h_full)
        .rev()
        .find(|&h| eps[h] > hcfg.eps_thres)
        .unwrap_or(hcfg.h_min)
}

/// State-to-action map used to propose plans.
pub trait PriorPolicy {
    fn act_into(&self, obs: &[f64], out: &mut [f64]) -> Result<(), NnError>;
}

/// Deterministic `horizon`-step rollout of `prior` through `model`.
pub fn prior_rollout<W: World>(
    prior: &dyn PriorPolicy,
    model: &EnvModel<W>,
    start: W::State,
    horizon: usize,
) -> Result<Trajectory<W::State>, NnError> {
    let d = model.action_dim();
    let mut obs = vec![0.0; model.obs_dim()];
    let mut traj = Trajectory::single(start, d);
    let mut s = start;
    let mut a = vec![0.0; d];
    for _ in 0..horizon {
        model.world.observe_into(&s, &mut obs);
        prior.act_into(&obs, &mut a)?;
        let tr = model.step(&s, &a);
        traj.actions.extend_from_slice(&a);
        traj.rewards.push(tr.reward);
        traj.states.push(tr.next);
        s = tr.next;
    }
    traj.return_estimate = traj.rewards.iter().sum();
    Ok(traj)
}

/// Observation matrix of `states`.
pub fn observation_matrix<W: World>(model: &EnvModel<W>, states: &[W::State]) -> Array2<f64> {
    let mut m = Array2::zeros((states.len(), model.obs_dim()));
    for (s, mut row) in states.iter().zip(m.rows_mut()) {
        model.world.observe_into(s, row.as_slice_mut().unwrap());
    }
    m
}

/// Terminal values `V̂(s)` for each state, zero without an ensemble.
pub fn terminal_values<W: World>(
    model: &EnvModel<W>,
    ens: Option<&ValueEnsemble>,
    states: &[W::State],
) -> Result<Vec<f64>, NnError> {
    match ens {
        None => Ok(vec![0.0; states.len()]),
        Some(ens) => ens.aggregate_batch(observation_matrix(model, states).view()),
    }
}

fn score_all<W: World>(
    model: &EnvModel<W>,
    ens: Option<&ValueEnsemble>,
    gamma: f64,
    trajs: &mut [Trajectory<W::State>],
) -> Result<(), NnError> {
    let ends: Vec<W::State> = trajs.iter().map(|t| t.last_state()).collect();
    let values = terminal_values(model, ens, &ends)?;
    for (t, v) in trajs.iter_mut().zip(values) {
        t.score(gamma, v);
    }
    Ok(())
}

/// One MPPI iteration around `base`. Member `i` perturbs the base actions
/// with noise from its own stream `(seed, t, iter, i)`; with two or more
/// members, member 0 keeps the base unperturbed. Returns the weighted
/// trajectory, re-rolled and scored, and the scored population.
#[allow(clippy::too_many_arguments)]
/// Updated mean plan and the sampled population.
pub type MppiStep<S> = (Trajectory<S>, Vec<Trajectory<S>>);

#[allow(clippy::too_many_arguments)]
pub fn mppi_update<W: World>(
    base: &Trajectory<W::State>,
    model: &EnvModel<W>,
    ens: Option<&ValueEnsemble>,
    cfg: &PlannerConfig,
    gamma: f64,
    seed: u64,
    t: u64,
    iter: usize,
) -> Result<MppiStep<W::State>, PlanError> {
    let start = base.first_state();
    let bound = cfg.action_bound;
    let elite = cfg.pop_size >= 2;
    let mut population: Vec<Trajectory<W::State>> = (0..cfg.pop_size)
        .into_par_iter()
        .map(|i| {
            let mut actions = base.actions.clone();
            if !(elite && i == 0) {
                let mut rng = stream_rng(seed, Stream::PlanNoise, t, pack(iter as u64, i as u64));
                for a in &mut actions {
                    let z: f64 = rng.sample(StandardNormal);
                    *a = (*a + cfg.noise_std * z).clamp(-bound, bound);
                }
            }
            model.rollout(start, &actions)
        })
        .collect();
    score_all(model, ens, gamma, &mut population)?;
    let returns: Vec<f64> = population.iter().map(|p| p.return_estimate).collect();
    let weights = softmax_weights(&returns, cfg.lambda);
    let mut actions = vec![0.0; base.actions.len()];
    for (w, p) in weights.iter().zip(&population) {
        for (a, &pa) in actions.iter_mut().zip(&p.actions) {
            *a += w * pa;
        }
    }
    let mut next = model.rollout(start, &actions);
    score_all(model, ens, gamma, std::slice::from_mut(&mut next))?;
    Ok((next, population))
}

/// Which candidate seeded the optimisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanSource {
    Prior,
    Shifted,
    Zero,
}

/// Per-timestep planning summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub t: u64,
    pub horizon: usize,
    pub iterations: usize,
    pub rolled_timesteps: u64,
    /// Ensemble standard deviation at the current state.
    pub sigma: f64,
    /// Bellman error averaged over the admissible horizons.
    pub eps: f64,
    pub deltas: Vec<f64>,
    /// Some improvement used a floored denominator.
    pub floored: bool,
    pub source: PlanSource,
}

pub struct PlanOutput<S> {
    pub action: Vec<f64>,
    pub record: PlanRecord,
    /// Optimised `H_t`-step trajectory.
    pub plan: Trajectory<S>,
    /// Every population rollout, when requested.
    pub rollouts: Vec<Trajectory<S>>,
}

/// Receding-horizon planner holding the previous plan between timesteps.
#[derive(Clone, Debug)]
pub struct Planner {
    pub cfg: PlannerConfig,
    pub hcfg: HorizonConfig,
    pub gamma: f64,
    pub seed: u64,
    /// Action sequence of length `h_full` carried to the next timestep.
    carried: Option<Vec<f64>>,
}

impl Planner {
    pub fn new(
        cfg: PlannerConfig,
        hcfg: HorizonConfig,
        gamma: f64,
        seed: u64,
    ) -> Result<Self, PlanError> {
        cfg.validate()?;
        hcfg.validate()?;
        Ok(Self {
            cfg,
            hcfg,
            gamma,
            seed,
            carried: None,
        })
    }

    /// Carried plan, already advanced past the last executed action.
    pub fn carried_plan(&self) -> Option<&[f64]> {
        self.carried.as_deref()
    }

    /// Plan from the model's current state at timestep `t`.
    pub fn plan_step<W: World>(
        &mut self,
        model: &EnvModel<W>,
        t: u64,
        prior: Option<&dyn PriorPolicy>,
        ens: Option<&ValueEnsemble>,
        keep_rollouts: bool,
    ) -> Result<PlanOutput<W::State>, PlanError> {
        let d = model.action_dim();
        let h_full = self.hcfg.h_full;
        let s0 = model.state;

        let mut candidates = Vec::with_capacity(2);
        if let Some(p) = prior {
            candidates.push((PlanSource::Prior, prior_rollout(p, model, s0, h_full)?));
        }
        if self.cfg.reuse_shifted_plan {
            if let Some(actions) = &self.carried {
                candidates.push((PlanSource::Shifted, model.rollout(s0, actions)));
            }
        }
        if candidates.is_empty() {
            candidates.push((PlanSource::Zero, model.rollout(s0, &vec![0.0; h_full * d])));
        }

        // Stats along every candidate give both the terminal value for the
        // argmax and the Bellman errors of the winner.
        let mut stats_of = Vec::with_capacity(candidates.len());
        for (_, traj) in &mut candidates {
            let obs = observation_matrix(model, &traj.states);
            match ens {
                Some(ens) => {
                    let (eps, stats) = ens.bellman_errors(&traj.rewards, obs.view())?;
                    traj.score(self.gamma, stats[h_full].aggregate);
                    stats_of.push(Some((eps, stats[0].std)));
                }
                None => {
                    traj.score(self.gamma, 0.0);
                    stats_of.push(None);
                }
            }
        }
        let mut best = 0;
        for i in 1..candidates.len() {
            if candidates[i].1.return_estimate >= candidates[best].1.return_estimate {
                best = i;
            }
        }
        let (source, full_plan) = candidates.swap_remove(best);
        let stats = stats_of.swap_remove(best);

        let (horizon, sigma, eps_mean) = match &stats {
            Some((eps, sigma)) => {
                let admissible = &eps[self.hcfg.h_min..=h_full];
                let mean = admissible.iter().sum::<f64>() / admissible.len() as f64;
                (choose_horizon(*sigma, eps, &self.hcfg), *sigma, mean)
            }
            None => (
                choose_horizon(0.0, &vec![0.0; h_full + 1], &self.hcfg),
                0.0,
                0.0,
            ),
        };

        let mut current = model.rollout(s0, &full_plan.actions[..horizon * d]);
        score_all(model, ens, self.gamma, std::slice::from_mut(&mut current))?;

        let mut term_rng = stream_rng(self.seed, Stream::Termination, t, 0);
        let mut deltas = Vec::new();
        let mut floored = false;
        let mut rollouts = Vec::new();
        let mut iterations = 0;
        for iter in 1..=self.cfg.max_iters {
            let (next, population) = mppi_update(
                &current, model, ens, &self.cfg, self.gamma, self.seed, t, iter,
            )?;
            iterations = iter;
            let (delta, fl) = improvement(current.return_estimate, next.return_estimate);
            deltas.push(delta);
            floored |= fl;
            current = next;
            if keep_rollouts {
                rollouts.extend(population);
            }
            if should_terminate(delta, iter, &self.cfg, &mut term_rng) {
                break;
            }
        }

        let mut carried = current.actions.clone();
        carried.extend_from_slice(&full_plan.actions[horizon * d..]);
        let action = carried[..d].to_vec();
        carried.drain(..d);
        carried.extend(std::iter::repeat_n(0.0, d));
        self.carried = Some(carried);

        Ok(PlanOutput {
            action,
            record: PlanRecord {
                t,
                horizon,
                iterations,
                rolled_timesteps: (iterations * self.cfg.pop_size * horizon) as u64,
                sigma,
                eps: eps_mean,
                deltas,
                floored,
                source,
            },
            plan: current,
            rollouts,
        })
    }
}
