//! Exact planning-regret accounting on small deterministic MDPs.
//!
//! For a tabular MDP the optimal values, the value of any stationary policy
//! and the exhaustive `H`-step plan are all computable exactly, so the
//! regret of a value-bootstrapped planner, its long/short-term split and the
//! long-term bound can be checked to round-off.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{stream_rng, Stream};

/// Largest action-sequence count the exhaustive planner accepts.
pub const MAX_SEQUENCES: u128 = 10_000_000;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RegretError {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("{actions}^{horizon} action sequences exceed the exhaustive limit")]
    TooLarge { actions: usize, horizon: usize },
}

/// Deterministic MDP with `next[s * A + a]` and `reward[s * A + a]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub next: Vec<usize>,
    pub reward: Vec<f64>,
    pub gamma: f64,
    pub r_max: f64,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        next: Vec<usize>,
        reward: Vec<f64>,
        gamma: f64,
        r_max: f64,
    ) -> Result<Self, RegretError> {
        let bad = |m: &str| Err(RegretError::InvalidMdp(m.into()));
        if n_states == 0 || n_actions == 0 {
            return bad("need at least one state and action");
        }
        if next.len() != n_states * n_actions || reward.len() != next.len() {
            return bad("tables must have n_states * n_actions entries");
        }
        if next.iter().any(|&s| s >= n_states) {
            return bad("transition to a nonexistent state");
        }
        if !(0.0..1.0).contains(&gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if reward.iter().any(|r| !(r.abs() <= r_max)) {
            return bad("reward exceeds r_max");
        }
        Ok(Self {
            n_states,
            n_actions,
            next,
            reward,
            gamma,
            r_max,
        })
    }

    /// Uniform random transitions and rewards in `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        n_states: usize,
        n_actions: usize,
        gamma: f64,
    ) -> Self {
        let n = n_states * n_actions;
        let next = (0..n).map(|_| rng.random_range(0..n_states)).collect();
        let reward = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self::new(n_states, n_actions, next, reward, gamma, 1.0).expect("valid random MDP")
    }

    pub fn next(&self, s: usize, a: usize) -> usize {
        self.next[s * self.n_actions + a]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    fn q(&self, v: &[f64], s: usize, a: usize) -> f64 {
        self.reward(s, a) + self.gamma * v[self.next(s, a)]
    }

    /// Action maximising `r + γ v(s')`; ties go to the lowest index.
    pub fn greedy_action(&self, v: &[f64], s: usize) -> usize {
        let mut best = 0;
        for a in 1..self.n_actions {
            if self.q(v, s, a) > self.q(v, s, best) {
                best = a;
            }
        }
        best
    }

    pub fn greedy_policy(&self, v: &[f64]) -> Vec<usize> {
        (0..self.n_states)
            .map(|s| self.greedy_action(v, s))
            .collect()
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Iterate `op` from zero until successive values differ by less than
/// `1e-13` in sup norm.
fn fixed_point(n: usize, mut op: impl FnMut(&[f64], usize) -> f64) -> Vec<f64> {
    let mut v = vec![0.0; n];
    loop {
        let next: Vec<f64> = (0..n).map(|s| op(&v, s)).collect();
        let done = sup_diff(&next, &v) < 1e-13;
        v = next;
        if done {
            return v;
        }
    }
}

/// Optimal values and a greedy optimal policy.
pub fn value_iteration(mdp: &TabularMdp) -> (Vec<f64>, Vec<usize>) {
    let v = fixed_point(mdp.n_states, |v, s| {
        (0..mdp.n_actions)
            .map(|a| mdp.q(v, s, a))
            .fold(f64::NEG_INFINITY, f64::max)
    });
    let pi = mdp.greedy_policy(&v);
    (v, pi)
}

/// Sup-norm Bellman optimality residual of `v`.
pub fn bellman_residual(mdp: &TabularMdp, v: &[f64]) -> f64 {
    (0..mdp.n_states)
        .map(|s| {
            let best = (0..mdp.n_actions)
                .map(|a| mdp.q(v, s, a))
                .fold(f64::NEG_INFINITY, f64::max);
            (best - v[s]).abs()
        })
        .fold(0.0, f64::max)
}

/// Value of a stationary deterministic policy.
pub fn policy_value(mdp: &TabularMdp, policy: &[usize]) -> Vec<f64> {
    fixed_point(mdp.n_states, |v, s| mdp.q(v, s, policy[s]))
}

/// Open-loop rollout of an action sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularRollout {
    pub actions: Vec<usize>,
    pub states: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl TabularRollout {
    pub fn new(mdp: &TabularMdp, start: usize, actions: &[usize]) -> Self {
        let mut states = vec![start];
        let mut rewards = Vec::with_capacity(actions.len());
        for &a in actions {
            let s = *states.last().unwrap();
            rewards.push(mdp.reward(s, a));
            states.push(mdp.next(s, a));
        }
        Self {
            actions: actions.to_vec(),
            states,
            rewards,
        }
    }

    /// `Σ_{k<h} γ^k r_k`.
    pub fn partial_return(&self, gamma: f64, h: usize) -> f64 {
        self.rewards[..h]
            .iter()
            .rev()
            .fold(0.0, |acc, &r| r + gamma * acc)
    }

    pub fn final_state(&self) -> usize {
        *self.states.last().unwrap()
    }
}

/// Exhaustive `H`-step plan from `start` maximising
/// `Σ γ^k r_k + γ^H v_hat(s_H)`; ties go to the lexicographically first
/// action sequence.
pub fn h_horizon_plan(
    mdp: &TabularMdp,
    start: usize,
    horizon: usize,
    v_hat: &[f64],
) -> Result<(TabularRollout, f64), RegretError> {
    if horizon == 0 {
        return Err(RegretError::ZeroHorizon);
    }
    let count = (mdp.n_actions as u128).checked_pow(horizon as u32);
    if count.is_none_or(|c| c > MAX_SEQUENCES) {
        return Err(RegretError::TooLarge {
            actions: mdp.n_actions,
            horizon,
        });
    }
    // Depth-first enumeration in lexicographic order.
    let gamma_h = mdp.gamma.powi(horizon as i32);
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut actions = vec![0usize; horizon];
    let mut states = vec![start; horizon + 1];
    let mut returns = vec![0.0; horizon + 1];
    let mut discounts = vec![1.0; horizon + 1];
    for k in 0..horizon {
        discounts[k + 1] = discounts[k] * mdp.gamma;
    }
    let mut depth = 0;
    loop {
        if depth == horizon {
            let j = returns[horizon] + gamma_h * v_hat[states[horizon]];
            if best.as_ref().is_none_or(|(_, b)| j > *b) {
                best = Some((actions.clone(), j));
            }
            // Backtrack to the deepest position with an untried action.
            loop {
                if depth == 0 {
                    let (acts, j) = best.expect("at least one sequence");
                    return Ok((TabularRollout::new(mdp, start, &acts), j));
                }
                depth -= 1;
                actions[depth] += 1;
                if actions[depth] < mdp.n_actions {
                    break;
                }
                actions[depth] = 0;
            }
        }
        let s = states[depth];
        let a = actions[depth];
        states[depth + 1] = mdp.next(s, a);
        returns[depth + 1] = returns[depth] + discounts[depth] * mdp.reward(s, a);
        depth += 1;
    }
}

/// Long-term regret bound for horizon `h`:
/// `2 R_max (1 - γ^H) / (γ^H (1 - γ)) + 2 ε_V + ε_P`.
pub fn lemma_bound(r_max: f64, gamma: f64, h: usize, eps_v: f64, eps_p: f64) -> f64 {
    let gh = gamma.powi(h as i32);
    2.0 * r_max * (1.0 - gh) / (gh * (1.0 - gamma)) + 2.0 * eps_v + eps_p
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    /// Planning regret.
    pub r: f64,
    /// Long-term regret.
    pub lr: f64,
    /// Short-term regret.
    pub sr: f64,
    pub eps_v: f64,
    pub eps_p: f64,
    pub bound: f64,
    pub h: usize,
    pub gamma: f64,
}

/// Regret of planning `h` steps with terminal `v_hat` and continuing with
/// the greedy policy on `v_hat`.
pub fn regret_report(
    mdp: &TabularMdp,
    start: usize,
    h: usize,
    v_hat: &[f64],
) -> Result<RegretReport, RegretError> {
    let (v_star, pi_star) = value_iteration(mdp);
    let pi = mdp.greedy_policy(v_hat);
    let v_pi = policy_value(mdp, &pi);
    let (plan, _) = h_horizon_plan(mdp, start, h, v_hat)?;
    let mut optimal_actions = Vec::with_capacity(h);
    let mut s = start;
    for _ in 0..h {
        optimal_actions.push(pi_star[s]);
        s = mdp.next(s, pi_star[s]);
    }
    let opt = TabularRollout::new(mdp, start, &optimal_actions);
    let g = mdp.gamma;
    let gh = g.powi(h as i32);
    let j_plan = plan.partial_return(g, h);
    let r = v_star[start] - (j_plan + gh * v_pi[plan.final_state()]);
    let lr = v_star[opt.final_state()] - v_pi[plan.final_state()];
    let sr = opt
        .rewards
        .iter()
        .zip(&plan.rewards)
        .rev()
        .fold(0.0, |acc, (ro, rp)| (ro - rp) + g * acc);
    let eps_v = sup_diff(v_hat, &v_pi);
    let eps_p = sup_diff(&v_star, &v_pi);
    Ok(RegretReport {
        r,
        lr,
        sr,
        eps_v,
        eps_p,
        bound: lemma_bound(mdp.r_max, g, h, eps_v, eps_p),
        h,
        gamma: g,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretSweepRow {
    pub seed: u64,
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub noise: f64,
    pub r: f64,
    pub lr: f64,
    pub sr: f64,
    pub bound: f64,
    pub holds: bool,
    /// `|R - (γ^H LR + SR)|`.
    pub identity_gap: f64,
}

/// Random instances: `S ≤ 20`, `A ≤ 3`, `H ≤ 5`, `γ ∈ {0.5, 0.9, 0.99}`,
/// and `v_hat = V* + noise` with a per-instance noise scale.
pub fn regret_sweep(instances: usize, base_seed: u64) -> Vec<RegretSweepRow> {
    (0..instances as u64)
        .map(|i| {
            let seed = base_seed.wrapping_add(i);
            let mut rng = stream_rng(seed, Stream::Init, u64::MAX, 0);
            let states = rng.random_range(2..=20);
            let actions = rng.random_range(2..=3);
            let horizon = rng.random_range(1..=5);
            let gamma = [0.5, 0.9, 0.99][rng.random_range(0..3)];
            let noise = [0.0, 0.1, 1.0, 10.0][rng.random_range(0..4)];
            let mdp = TabularMdp::random(&mut rng, states, actions, gamma);
            let (v_star, _) = value_iteration(&mdp);
            let v_hat: Vec<f64> = v_star
                .iter()
                .map(|v| v + noise * rng.random_range(-1.0..=1.0))
                .collect();
            let start = rng.random_range(0..states);
            let rep = regret_report(&mdp, start, horizon, &v_hat).expect("small instance");
            let gh = gamma.powi(horizon as i32);
            RegretSweepRow {
                seed,
                states,
                actions,
                horizon,
                gamma,
                noise,
                r: rep.r,
                lr: rep.lr,
                sr: rep.sr,
                bound: rep.bound,
                holds: rep.lr <= rep.bound + 1e-9,
                identity_gap: (rep.r - (gh * rep.lr + rep.sr)).abs(),
            }
        })
        .collect()
}

/// Terminal estimate used when ranking truncated trajectories.
#[derive(Clone, Debug, PartialEq)]
pub enum TerminalEstimate {
    Zero,
    State(Vec<f64>),
    /// The true remaining value of the trajectory itself: its rewards past
    /// the cut plus the optimal value at its end.
    Exact,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingMatrix {
    /// `ranks[h - 1][i]`: rank of trajectory `i` when scored at horizon `h`
    /// (1 = best, ties share the average rank).
    pub ranks: Vec<Vec<f64>>,
    pub oracle_ranks: Vec<f64>,
    pub oracle_scores: Vec<f64>,
}

impl RankingMatrix {
    /// Kendall tau-b of every horizon column against the oracle.
    pub fn taus(&self) -> Vec<f64> {
        self.ranks
            .iter()
            .map(|col| kendall_tau_b(col, &self.oracle_ranks))
            .collect()
    }
}

/// Average ranks in descending score order; scores within `1e-9` tie.
pub fn ranks_desc(scores: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && (scores[idx[i]] - scores[idx[j]]).abs() <= 1e-9 {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Kendall tau-b; 1 when either side is fully tied and the other is too,
/// 0 when only one side is fully tied.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> f64 {
    let (mut c, mut d, mut tx, mut ty) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let a = (x[i] - x[j]).signum() * f64::from(x[i] != x[j]);
            let b = (y[i] - y[j]).signum() * f64::from(y[i] != y[j]);
            match (a == 0.0, b == 0.0) {
                (true, true) => {}
                (true, false) => tx += 1.0,
                (false, true) => ty += 1.0,
                (false, false) if a == b => c += 1.0,
                _ => d += 1.0,
            }
        }
    }
    let denom = ((c + d + tx) * (c + d + ty)).sqrt();
    if denom == 0.0 {
        return if tx == 0.0 && ty == 0.0 { 1.0 } else { 0.0 };
    }
    (c - d) / denom
}

/// Rank every trajectory (an action sequence of length `h_max` from
/// `start`) at each horizon `1..=h_max`, against the oracle score
/// `Σ_{k<h_max} γ^k r_k + γ^{h_max} V*(s_{h_max})`.
pub fn ranking_matrix(
    mdp: &TabularMdp,
    start: usize,
    population: &[Vec<usize>],
    h_max: usize,
    terminal: &TerminalEstimate,
) -> RankingMatrix {
    let (v_star, _) = value_iteration(mdp);
    let g = mdp.gamma;
    let rolls: Vec<TabularRollout> = population
        .iter()
        .map(|acts| TabularRollout::new(mdp, start, &acts[..h_max]))
        .collect();
    let oracle_scores: Vec<f64> = rolls
        .iter()
        .map(|r| r.partial_return(g, h_max) + g.powi(h_max as i32) * v_star[r.final_state()])
        .collect();
    let ranks = (1..=h_max)
        .map(|h| {
            let scores: Vec<f64> = rolls
                .iter()
                .zip(&oracle_scores)
                .map(|(r, &oracle)| match terminal {
                    TerminalEstimate::Zero => r.partial_return(g, h),
                    TerminalEstimate::State(v) => {
                        r.partial_return(g, h) + g.powi(h as i32) * v[r.states[h]]
                    }
                    TerminalEstimate::Exact => oracle,
                })
                .collect();
            ranks_desc(&scores)
        })
        .collect();
    RankingMatrix {
        ranks,
        oracle_ranks: ranks_desc(&oracle_scores),
        oracle_scores,
    }
}

/// Chain whose payoff arrives late, next to a lure that pays a little
/// immediately.
///
/// States: `0..depth` along the chain, `depth` the rewarding end, and
/// `depth + 1` the lure. Action 1 advances along the chain (reward 0), the
/// end pays `goal_reward` forever; action 0 diverts into the lure, which
/// pays `lure_reward` forever. Returns the MDP and the population "advance
/// `i` steps, then divert" for `i in 0..=depth`, plus "always advance",
/// each of length `h_max = depth + 2`.
pub fn delayed_reward_instance(depth: usize, gamma: f64) -> (TabularMdp, Vec<Vec<usize>>, usize) {
    let goal_reward = 1.0;
    let lure_reward = 0.2;
    let n = depth + 2;
    let goal = depth;
    let lure = depth + 1;
    let mut next = vec![0; n * 2];
    let mut reward = vec![0.0; n * 2];
    for s in 0..n {
        let (divert, advance) = match s {
            s if s == lure => ((lure, lure_reward), (lure, lure_reward)),
            s if s == goal => ((lure, lure_reward), (goal, goal_reward)),
            s => ((lure, lure_reward), (s + 1, 0.0)),
        };
        next[s * 2] = divert.0;
        reward[s * 2] = divert.1;
        next[s * 2 + 1] = advance.0;
        reward[s * 2 + 1] = advance.1;
    }
    let mdp = TabularMdp::new(n, 2, next, reward, gamma, 1.0).expect("valid chain");
    let h_max = depth + 2;
    let mut population: Vec<Vec<usize>> = (0..=depth)
        .map(|i| (0..h_max).map(|k| usize::from(k < i)).collect())
        .collect();
    population.push(vec![1; h_max]);
    (mdp, population, h_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn absorbing_state_value() {
        let mdp = TabularMdp::new(1, 1, vec![0], vec![1.0], 0.9, 1.0).unwrap();
        let (v, pi) = value_iteration(&mdp);
        assert!((v[0] - 10.0).abs() < 1e-11);
        assert_eq!(pi, vec![0]);
    }

    #[test]
    fn two_state_chain_hand_solution() {
        // s0 -> s1 with reward 0, s1 -> s1 with reward 1, γ = 0.5.
        let mdp = TabularMdp::new(2, 1, vec![1, 1], vec![0.0, 1.0], 0.5, 1.0).unwrap();
        let (v, _) = value_iteration(&mdp);
        assert!((v[0] - 1.0).abs() < 1e-12 && (v[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rewards_zero_values() {
        let mdp = TabularMdp::new(3, 2, vec![1, 2, 0, 0, 2, 1], vec![0.0; 6], 0.99, 1.0).unwrap();
        assert!(value_iteration(&mdp).0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_below_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let mdp = TabularMdp::random(&mut rng, 15, 3, 0.99);
            let (v, _) = value_iteration(&mdp);
            assert!(bellman_residual(&mdp, &v) < 1e-12);
        }
    }

    #[test]
    fn one_step_plan_on_true_values_is_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mdp = TabularMdp::random(&mut rng, 10, 3, 0.9);
        let (v, pi) = value_iteration(&mdp);
        for s in 0..10 {
            let (plan, j) = h_horizon_plan(&mdp, s, 1, &v).unwrap();
            assert!((j - v[s]).abs() < 1e-9);
            let q_plan = mdp.reward(s, plan.actions[0]) + 0.9 * v[plan.states[1]];
            let q_opt = mdp.reward(s, pi[s]) + 0.9 * v[mdp.next(s, pi[s])];
            assert!((q_plan - q_opt).abs() < 1e-12);
        }
    }

    #[test]
    fn myopic_planner_regrets_on_delayed_chain() {
        let (mdp, _, _) = delayed_reward_instance(4, 0.9);
        let zero = vec![0.0; mdp.n_states];
        let rep = regret_report(&mdp, 0, 2, &zero).unwrap();
        assert!(rep.r > 0.0);
        let (v_star, _) = value_iteration(&mdp);
        let exact = regret_report(&mdp, 0, 5, &v_star).unwrap();
        assert!(exact.r.abs() < 1e-9 && exact.lr.abs() < 1e-9 && exact.sr.abs() < 1e-9);
    }

    #[test]
    fn exhaustive_limit() {
        let mdp = TabularMdp::new(1, 8, vec![0; 8], vec![0.0; 8], 0.5, 1.0).unwrap();
        assert_eq!(
            h_horizon_plan(&mdp, 0, 8, &[0.0]).unwrap_err(),
            RegretError::TooLarge {
                actions: 8,
                horizon: 8
            }
        );
        assert_eq!(
            h_horizon_plan(&mdp, 0, 0, &[0.0]).unwrap_err(),
            RegretError::ZeroHorizon
        );
    }

    #[test]
    fn kendall_tau_cases() {
        assert_eq!(kendall_tau_b(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 1.0);
        assert_eq!(kendall_tau_b(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        assert_eq!(kendall_tau_b(&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]), 1.0);
        assert_eq!(ranks_desc(&[0.5, 2.0, 0.5]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn identical_trajectories_tie_everywhere() {
        let (mdp, _, h) = delayed_reward_instance(3, 0.9);
        let pop = vec![vec![1; h]; 4];
        let m = ranking_matrix(&mdp, 0, &pop, h, &TerminalEstimate::Zero);
        assert!(m.ranks.iter().all(|c| c.iter().all(|&r| r == 2.5)));
    }
}
