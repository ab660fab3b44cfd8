//! Terminal value ensemble.
//!
//! `n` independently initialised value networks `V_i` give three things:
//! an optimistic terminal estimate `(1/κ) log((1/n) Σ exp(κ V_i))`, which
//! always lies between the member mean and the member max; the member
//! standard deviation as an epistemic-uncertainty signal; and the squared
//! Bellman error of the mean value against a planned trajectory segment.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{adam_step, AdamState, Mlp, NnError};

#[derive(Debug, thiserror::Error)]
pub enum EnsembleError {
    #[error("value buffer is empty")]
    EmptyBuffer,
    #[error("horizon {h} outside [0, {h_full}] or trajectory too short ({len} rewards)")]
    HorizonOutOfRange { h: usize, h_full: usize, len: usize },
    #[error("value regression diverged (loss {0})")]
    Divergence(f64),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub members: usize,
    pub hidden: Vec<usize>,
    /// Softmax temperature κ of the aggregate.
    pub kappa: f64,
    pub learning_rate: f64,
    /// Gradient steps per member per update round.
    pub steps: usize,
    pub batch: usize,
    /// Reward steps in the bootstrapped regression target.
    pub nstep: usize,
    pub buffer_capacity: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: 6,
            hidden: vec![64, 64],
            kappa: 1e-2,
            learning_rate: 1e-3,
            steps: 32,
            batch: 32,
            nstep: 32,
            buffer_capacity: 100_000,
        }
    }
}

/// `(1/κ) log((1/n) Σ exp(κ v_i))`, evaluated around the max so that it
/// neither overflows for large `κ v` nor loses the mean for tiny `κ`.
pub fn log_sum_exp_aggregate(values: &[f64], kappa: f64) -> f64 {
    let n = values.len() as f64;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean_expm1 = values
        .iter()
        .map(|&v| (kappa * (v - max)).exp_m1())
        .sum::<f64>()
        / n;
    let agg = max + mean_expm1.ln_1p() / kappa;
    // Clamp away round-off outside the mean..max bracket.
    let mean = values.iter().sum::<f64>() / n;
    agg.clamp(mean.min(max), max)
}

/// Population standard deviation (divides by `n`).
pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// `(Σ_k γ^k r_k + γ^{len} terminal - head_mean)^2` with the discount
/// restarting at the head of the segment.
pub fn bellman_error_from_parts(
    segment_rewards: &[f64],
    terminal_aggregate: f64,
    head_mean: f64,
    gamma: f64,
) -> f64 {
    let mut ret = terminal_aggregate;
    for &r in segment_rewards.iter().rev() {
        ret = r + gamma * ret;
    }
    (ret - head_mean).powi(2)
}

/// Per-state summary of the ensemble.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValueStats {
    pub mean: f64,
    pub aggregate: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValueEnsemble {
    members: Vec<Mlp>,
    optimizers: Vec<AdamState>,
    kappa: f64,
    gamma: f64,
}

impl ValueEnsemble {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        cfg: &EnsembleConfig,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let mut sizes = vec![obs_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(1);
        let members = (0..cfg.members)
            .map(|_| Mlp::new(&sizes, rng))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_members(
            members,
            cfg.kappa,
            gamma,
            cfg.learning_rate,
        ))
    }

    pub fn from_members(members: Vec<Mlp>, kappa: f64, gamma: f64, learning_rate: f64) -> Self {
        let optimizers = members
            .iter()
            .map(|m| AdamState::for_net(m, learning_rate))
            .collect();
        Self {
            members,
            optimizers,
            kappa,
            gamma,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[Mlp] {
        &self.members
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    pub fn member_values(&self, obs: &[f64]) -> Result<Vec<f64>, NnError> {
        self.members
            .iter()
            .map(|m| m.forward(obs).map(|v| v[0]))
            .collect()
    }

    /// Member values for a batch of observations, shape `(rows, n)`.
    pub fn member_values_batch(&self, obs: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        let mut out = Array2::zeros((obs.nrows(), self.members.len()));
        for (i, m) in self.members.iter().enumerate() {
            let v = m.forward_batch(obs)?;
            out.column_mut(i).assign(&v.column(0));
        }
        Ok(out)
    }

    pub fn aggregate(&self, obs: &[f64]) -> Result<f64, NnError> {
        Ok(log_sum_exp_aggregate(&self.member_values(obs)?, self.kappa))
    }

    pub fn aggregate_batch(&self, obs: ArrayView2<f64>) -> Result<Vec<f64>, NnError> {
        let vals = self.member_values_batch(obs)?;
        Ok(vals
            .rows()
            .into_iter()
            .map(|r| log_sum_exp_aggregate(r.as_slice().unwrap(), self.kappa))
            .collect())
    }

    pub fn std(&self, obs: &[f64]) -> Result<f64, NnError> {
        Ok(population_std(&self.member_values(obs)?))
    }

    pub fn stats_batch(&self, obs: ArrayView2<f64>) -> Result<Vec<ValueStats>, NnError> {
        let vals = self.member_values_batch(obs)?;
        Ok(vals
            .rows()
            .into_iter()
            .map(|r| {
                let v = r.as_slice().unwrap();
                ValueStats {
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                    aggregate: log_sum_exp_aggregate(v, self.kappa),
                    std: population_std(v),
                }
            })
            .collect())
    }

    /// Bellman error of horizon `h` against a trajectory whose observations
    /// `s_0..=s_{h_full}` are the rows of `observations`.
    pub fn bellman_error(
        &self,
        rewards: &[f64],
        observations: ArrayView2<f64>,
        h: usize,
        h_full: usize,
    ) -> Result<f64, EnsembleError> {
        if h > h_full || rewards.len() < h_full || observations.nrows() < h_full + 1 {
            return Err(EnsembleError::HorizonOutOfRange {
                h,
                h_full,
                len: rewards.len(),
            });
        }
        let head = self.member_values(observations.row(h).as_slice().unwrap())?;
        let head_mean = head.iter().sum::<f64>() / head.len() as f64;
        let terminal = self.aggregate(observations.row(h_full).as_slice().unwrap())?;
        Ok(bellman_error_from_parts(
            &rewards[h..h_full],
            terminal,
            head_mean,
            self.gamma,
        ))
    }

    /// `ε(H)` for every `H` in `0..=h_full`, plus the stats of every row.
    pub fn bellman_errors(
        &self,
        rewards: &[f64],
        observations: ArrayView2<f64>,
    ) -> Result<(Vec<f64>, Vec<ValueStats>), EnsembleError> {
        let h_full = rewards.len();
        if observations.nrows() != h_full + 1 {
            return Err(EnsembleError::HorizonOutOfRange {
                h: observations.nrows(),
                h_full,
                len: rewards.len(),
            });
        }
        let stats = self.stats_batch(observations)?;
        let mut eps = vec![0.0; h_full + 1];
        let mut ret = stats[h_full].aggregate;
        eps[h_full] = (ret - stats[h_full].mean).powi(2);
        for h in (0..h_full).rev() {
            ret = rewards[h] + self.gamma * ret;
            eps[h] = (ret - stats[h].mean).powi(2);
        }
        Ok((eps, stats))
    }

    /// Fit every member to `nstep`-step bootstrapped returns along the stored
    /// experience. Each member bootstraps from a frozen copy of itself taken
    /// at the start of the round and draws its own minibatches. Returns the
    /// mean regression loss.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        buffer: &ValueBuffer,
        steps: usize,
        batch: usize,
        nstep: usize,
        rng: &mut R,
    ) -> Result<f64, EnsembleError> {
        if buffer.is_empty() {
            return Err(EnsembleError::EmptyBuffer);
        }
        if steps == 0 {
            return Ok(0.0);
        }
        let obs_dim = self.input_dim();
        let len = buffer.len();
        let mut total_loss = 0.0;
        let mut inputs = Array2::zeros((batch, obs_dim));
        let mut boot = Array2::zeros((batch, obs_dim));
        let mut partial = vec![0.0; batch];
        let mut boot_discount = vec![0.0; batch];
        for (member, adam) in self.members.iter_mut().zip(&mut self.optimizers) {
            let lagged = member.clone();
            for _ in 0..steps {
                for b in 0..batch {
                    let i = rng.random_range(0..len);
                    let m = nstep.min(len - i).max(1);
                    let mut g = 0.0;
                    let mut disc = 1.0;
                    for k in 0..m {
                        g += disc * buffer.get(i + k).reward;
                        disc *= self.gamma;
                    }
                    partial[b] = g;
                    boot_discount[b] = disc;
                    inputs
                        .row_mut(b)
                        .assign(&ndarray::ArrayView1::from(&buffer.get(i).obs[..]));
                    boot.row_mut(b).assign(&ndarray::ArrayView1::from(
                        &buffer.get(i + m - 1).next_obs[..],
                    ));
                }
                let tail = lagged.forward_batch(boot.view())?;
                let cache = member.forward_cached(inputs.view())?;
                let pred = cache.output();
                let mut upstream = Array2::zeros((batch, 1));
                let mut loss = 0.0;
                for b in 0..batch {
                    let target = partial[b] + boot_discount[b] * tail[[b, 0]];
                    let d = pred[[b, 0]] - target;
                    loss += d * d;
                    upstream[[b, 0]] = 2.0 * d / batch as f64;
                }
                loss /= batch as f64;
                if !loss.is_finite() {
                    return Err(EnsembleError::Divergence(loss));
                }
                let (grad, _) = member.backward(&cache, upstream.view())?;
                adam_step(member.params_mut(), &grad, adam)?;
                total_loss += loss;
            }
        }
        Ok(total_loss / (steps * self.members.len()) as f64)
    }
}

/// One real transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueRecord {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub reward: f64,
}

/// Capacity-bounded FIFO of real transitions in arrival order.
#[derive(Clone, Debug)]
pub struct ValueBuffer {
    records: VecDeque<ValueRecord>,
    capacity: usize,
}

impl ValueBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            records: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, record: ValueRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Record `i`, oldest first.
    pub fn get(&self, i: usize) -> &ValueRecord {
        &self.records[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ValueRecord> {
        self.records.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_member(c: f64) -> Mlp {
        let mut m = Mlp::zeros(&[2, 3, 1]).unwrap();
        let n = m.param_count();
        m.params_mut()[n - 1] = c;
        m
    }

    #[test]
    fn identical_members_aggregate_to_their_value() {
        for kappa in [1e-6, 1e-2, 1.0, 50.0] {
            let agg = log_sum_exp_aggregate(&[3.5; 6], kappa);
            assert!((agg - 3.5).abs() < 1e-12, "{kappa}: {agg}");
        }
    }

    #[test]
    fn two_member_aggregate_closed_forms() {
        let small = log_sum_exp_aggregate(&[0.0, 10.0], 0.01);
        let expected = 100.0 * (0.5 * (1.0 + 0.1f64.exp())).ln();
        assert!((small - expected).abs() < 1e-12);
        assert!((small - 5.1249).abs() < 1e-4);
        let large = log_sum_exp_aggregate(&[0.0, 10.0], 10.0);
        assert!((large - 10.0).abs() < 0.07 && large <= 10.0);
    }

    #[test]
    fn population_std_uses_n() {
        assert_eq!(population_std(&[1.0, 3.0]), 1.0);
        assert_eq!(population_std(&[2.0; 4]), 0.0);
    }

    #[test]
    fn bellman_error_hand_value() {
        let e = bellman_error_from_parts(&[1.0, 1.0], 10.0, 11.0, 0.99);
        assert!((e - 0.791f64.powi(2)).abs() < 1e-12);
        assert!((e - 0.6257).abs() < 1e-4);
    }

    #[test]
    fn zero_world_has_zero_bellman_error() {
        let ens = ValueEnsemble::from_members(vec![constant_member(0.0); 3], 0.01, 0.99, 1e-3);
        let obs = Array2::from_elem((5, 2), 0.3);
        let rewards = [0.0; 4];
        let (eps, _) = ens.bellman_errors(&rewards, obs.view()).unwrap();
        assert!(eps.iter().all(|&e| e == 0.0));
        for h in 0..=4 {
            assert_eq!(ens.bellman_error(&rewards, obs.view(), h, 4).unwrap(), 0.0);
        }
    }

    #[test]
    fn full_horizon_segment_is_empty() {
        let ens = ValueEnsemble::from_members(vec![constant_member(-4.0); 4], 0.01, 0.9, 1e-3);
        let obs = Array2::from_elem((4, 2), 0.1);
        let e = ens
            .bellman_error(&[1.0, 2.0, 3.0], obs.view(), 3, 3)
            .unwrap();
        assert_eq!(e, 0.0);
        assert!(matches!(
            ens.bellman_error(&[1.0, 2.0, 3.0], obs.view(), 4, 3),
            Err(EnsembleError::HorizonOutOfRange { .. })
        ));
    }

    #[test]
    fn batch_and_single_bellman_errors_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = EnsembleConfig {
            hidden: vec![8],
            ..EnsembleConfig::default()
        };
        let ens = ValueEnsemble::new(2, &cfg, 0.95, &mut rng).unwrap();
        let obs = Array2::from_shape_fn((7, 2), |(i, j)| (i as f64 * 0.1) - j as f64 * 0.3);
        let rewards = [0.5, -1.0, 0.25, 0.0, 2.0, -0.5];
        let (eps, _) = ens.bellman_errors(&rewards, obs.view()).unwrap();
        for h in 0..=6 {
            let single = ens.bellman_error(&rewards, obs.view(), h, 6).unwrap();
            assert!((single - eps[h]).abs() < 1e-9 * (1.0 + single));
        }
    }

    #[test]
    fn fresh_ensemble_disagrees_on_novel_states() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ens = ValueEnsemble::new(4, &EnsembleConfig::default(), 0.99, &mut rng).unwrap();
            assert!(ens.std(&[0.3, 0.9, 0.1, 0.5]).unwrap() > 0.0);
        }
    }

    #[test]
    fn zero_steps_leave_members_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ens = ValueEnsemble::new(2, &EnsembleConfig::default(), 0.99, &mut rng).unwrap();
        let before = ens.members().to_vec();
        let mut buf = ValueBuffer::new(10);
        buf.push(ValueRecord {
            obs: vec![0.0, 0.0],
            action: vec![0.0],
            next_obs: vec![0.0, 0.0],
            reward: 1.0,
        });
        ens.train(&buf, 0, 32, 32, &mut rng).unwrap();
        assert_eq!(ens.members(), &before[..]);
        assert!(matches!(
            ens.train(&ValueBuffer::new(4), 1, 1, 1, &mut rng),
            Err(EnsembleError::EmptyBuffer)
        ));
    }

    #[test]
    fn constant_reward_cycle_converges_to_geometric_value() {
        let gamma = 0.99;
        let reward = 0.1;
        let cycle = [
            array![0.1, 0.2],
            array![0.8, 0.3],
            array![0.5, 0.9],
            array![0.2, 0.7],
        ];
        let mut buf = ValueBuffer::new(10_000);
        for t in 0..400 {
            let s = &cycle[t % 4];
            let s2 = &cycle[(t + 1) % 4];
            buf.push(ValueRecord {
                obs: s.to_vec(),
                action: vec![0.0],
                next_obs: s2.to_vec(),
                reward,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = EnsembleConfig {
            members: 2,
            ..EnsembleConfig::default()
        };
        let mut ens = ValueEnsemble::new(2, &cfg, gamma, &mut rng).unwrap();
        for _ in 0..150 {
            ens.train(&buf, 32, 32, 32, &mut rng).unwrap();
        }
        let target = reward / (1.0 - gamma);
        for s in &cycle {
            for v in ens.member_values(s.as_slice().unwrap()).unwrap() {
                assert!((v - target).abs() < 0.05 * target, "{v} vs {target}");
            }
        }
    }

    #[test]
    fn buffer_is_bounded_fifo() {
        let mut buf = ValueBuffer::new(3);
        for i in 0..5 {
            buf.push(ValueRecord {
                obs: vec![i as f64],
                action: vec![],
                next_obs: vec![],
                reward: i as f64,
            });
        }
        assert_eq!(buf.len(), 3);
        let rewards: Vec<f64> = buf.iter().map(|r| r.reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }
}
