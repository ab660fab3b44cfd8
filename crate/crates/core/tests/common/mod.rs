#![allow(clippy::needless_range_loop)]

//! Independent oracles shared by the integration test targets.
#![allow(dead_code)]

use aop_core::ensemble::ValueEnsemble;
use aop_core::envs::{LifelongEnv, World};
use aop_core::nn::Mlp;
use aop_core::regret::{regret_report, RegretReport, TabularMdp};
use aop_core::rng::{pack, stream_rng, Stream};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

/// Largest relative error between backprop and central differences for the
/// scalar loss `sum(upstream * net(input))`.
pub fn fd_max_rel_error(net: &Mlp, input: &Array2<f64>, upstream: &Array2<f64>) -> f64 {
    let cache = net.forward_cached(input.view()).unwrap();
    let (analytic, _) = net.backward(&cache, upstream.view()).unwrap();
    let loss = |n: &Mlp| -> f64 {
        let out = n.forward_batch(input.view()).unwrap();
        (&out * upstream).sum()
    };
    let h = 1e-6;
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for i in 0..net.param_count() {
        let p = net.params()[i];
        probe.params_mut()[i] = p + h;
        let up = loss(&probe);
        probe.params_mut()[i] = p - h;
        let down = loss(&probe);
        probe.params_mut()[i] = p;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// Random net with 1 to 3 hidden layers of width at most 16.
pub fn random_small_mlp<R: Rng>(rng: &mut R) -> Mlp {
    let hidden = rng.random_range(1..=3);
    let mut sizes = vec![rng.random_range(1..=6)];
    for _ in 0..hidden {
        sizes.push(rng.random_range(1..=16));
    }
    sizes.push(rng.random_range(1..=4));
    let mut net = Mlp::new(&sizes, rng).unwrap();
    // Non-zero biases so every code path carries signal.
    for p in net.params_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    net
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// `(1/κ) ln((1/n) Σ exp(κ v_i))` evaluated literally.
pub fn naive_lse(values: &[f64], kappa: f64) -> f64 {
    let s: f64 = values.iter().map(|v| (kappa * v).exp()).sum();
    (s / values.len() as f64).ln() / kappa
}

pub struct MppiSettings {
    pub pop: usize,
    pub iters: usize,
    pub horizon: usize,
    pub lambda: f64,
    pub noise: f64,
    pub gamma: f64,
    pub bound: f64,
}

impl Default for MppiSettings {
    fn default() -> Self {
        Self {
            pop: 40,
            iters: 8,
            horizon: 80,
            lambda: 0.01,
            noise: 0.1,
            gamma: 0.99,
            bound: 1.0,
        }
    }
}

/// Textbook receding-horizon MPPI with no terminal value, written against
/// the raw `World` interface. Noise for member `i > 0` of iteration `k` at
/// timestep `t` comes from the `(seed, PlanNoise, t, pack(k, i))` stream,
/// one standard normal per action entry in time-major order; member 0 is
/// the unperturbed plan.
pub fn reference_mpc<W: World>(
    env: &mut LifelongEnv<W>,
    seed: u64,
    steps: usize,
    cfg: &MppiSettings,
) -> Vec<Vec<f64>> {
    let d = env.world().action_dim();
    let mut plan = vec![0.0; cfg.horizon * d];
    let mut executed = Vec::with_capacity(steps);
    for t in 0..steps as u64 {
        let world = env.world().clone();
        let s0 = env.state();
        let score = |actions: &[f64]| -> f64 {
            let mut s = s0;
            let mut rewards = Vec::with_capacity(cfg.horizon);
            for a in actions.chunks(d) {
                let tr = world.transition(&s, a);
                rewards.push(tr.reward);
                s = tr.next;
            }
            rewards.iter().rev().fold(0.0, |acc, r| r + cfg.gamma * acc)
        };
        for k in 1..=cfg.iters as u64 {
            let mut members = Vec::with_capacity(cfg.pop);
            for i in 0..cfg.pop as u64 {
                let mut acts = plan.clone();
                if i > 0 {
                    let mut rng = stream_rng(seed, Stream::PlanNoise, t, pack(k, i));
                    for a in &mut acts {
                        let z: f64 = rng.sample(StandardNormal);
                        *a = (*a + cfg.noise * z).clamp(-cfg.bound, cfg.bound);
                    }
                }
                members.push(acts);
            }
            let returns: Vec<f64> = members.iter().map(|m| score(m)).collect();
            let best = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut w: Vec<f64> = returns
                .iter()
                .map(|j| ((j - best) / cfg.lambda).exp())
                .collect();
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= total);
            let mut next = vec![0.0; plan.len()];
            for (wi, m) in w.iter().zip(&members) {
                for (n, a) in next.iter_mut().zip(m) {
                    *n += wi * a;
                }
            }
            plan = next;
        }
        let action = plan[..d].to_vec();
        plan.drain(..d);
        plan.extend(std::iter::repeat_n(0.0, d));
        env.step(&action);
        executed.push(action);
    }
    executed
}

/// Optimal values by plain value iteration to a `1e-14` sup-norm change.
pub fn oracle_values(mdp: &TabularMdp) -> Vec<f64> {
    let mut v = vec![0.0; mdp.n_states];
    loop {
        let next: Vec<f64> = (0..mdp.n_states)
            .map(|s| {
                (0..mdp.n_actions)
                    .map(|a| mdp.reward(s, a) + mdp.gamma * v[mdp.next(s, a)])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let diff = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if diff < 1e-14 {
            return v;
        }
    }
}

/// Value of a fixed deterministic policy by iteration.
pub fn oracle_policy_values(mdp: &TabularMdp, pi: &[usize]) -> Vec<f64> {
    let mut v = vec![0.0; mdp.n_states];
    loop {
        let next: Vec<f64> = (0..mdp.n_states)
            .map(|s| mdp.reward(s, pi[s]) + mdp.gamma * v[mdp.next(s, pi[s])])
            .collect();
        let diff = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if diff < 1e-14 {
            return v;
        }
    }
}

/// Every action sequence of length `h`, in lexicographic order.
pub fn all_sequences(n_actions: usize, h: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..h {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..n_actions).map(move |a| {
                    let mut q = p.clone();
                    q.push(a);
                    q
                })
            })
            .collect();
    }
    out
}

/// `(discounted rewards, final state)` of an open-loop sequence.
pub fn oracle_rollout(mdp: &TabularMdp, start: usize, actions: &[usize]) -> (Vec<f64>, usize) {
    let mut s = start;
    let mut r = Vec::new();
    for &a in actions {
        r.push(mdp.reward(s, a));
        s = mdp.next(s, a);
    }
    (r, s)
}

pub fn discounted(rewards: &[f64], gamma: f64) -> f64 {
    rewards
        .iter()
        .enumerate()
        .map(|(k, r)| gamma.powi(k as i32) * r)
        .sum()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sample standard deviation (n - 1 in the denominator).
pub fn sample_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

/// Ensemble of `n` random nets whose outputs are spread over roughly
/// `±scale`, with `scale` log-uniform up to `10^max_exp`.
pub fn random_ensemble<R: Rng>(
    rng: &mut R,
    obs_dim: usize,
    kappa: f64,
    max_exp: f64,
) -> ValueEnsemble {
    let n = rng.random_range(1..=8);
    let scale = 10f64.powf(rng.random_range(-1.0..max_exp));
    let members = (0..n)
        .map(|_| {
            let mut m = Mlp::new(&[obs_dim, 8, 1], rng).unwrap();
            let len = m.param_count();
            for p in &mut m.params_mut()[len - 9..] {
                *p *= scale;
            }
            m.params_mut()[len - 1] = rng.random_range(-scale..scale);
            m
        })
        .collect();
    ValueEnsemble::from_members(members, kappa, 0.99, 1e-3)
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

/// Recompute every field of a regret report from first principles.
pub fn check_against_oracle(
    mdp: &TabularMdp,
    start: usize,
    h: usize,
    v_hat: &[f64],
) -> RegretReport {
    let g = mdp.gamma;
    let gh = g.powi(h as i32);
    let v_star = oracle_values(mdp);
    let pi: Vec<usize> = (0..mdp.n_states)
        .map(|s| {
            let q = |a: usize| mdp.reward(s, a) + g * v_hat[mdp.next(s, a)];
            (0..mdp.n_actions).fold(0, |b, a| if q(a) > q(b) { a } else { b })
        })
        .collect();
    let v_pi = oracle_policy_values(mdp, &pi);

    let mut best: Option<(Vec<f64>, usize, f64)> = None;
    for seq in all_sequences(mdp.n_actions, h) {
        let (r, end) = oracle_rollout(mdp, start, &seq);
        let j = discounted(&r, g) + gh * v_hat[end];
        if best.as_ref().is_none_or(|b| j > b.2) {
            best = Some((r, end, j));
        }
    }
    let (plan_r, plan_end, _) = best.unwrap();
    let v_opt = oracle_values(mdp);
    // Optimal open-loop rollout: follow any action achieving V*.
    let mut s = start;
    let mut opt_r = Vec::new();
    for _ in 0..h {
        let a = (0..mdp.n_actions)
            .find(|&a| close(mdp.reward(s, a) + g * v_opt[mdp.next(s, a)], v_opt[s]))
            .unwrap();
        opt_r.push(mdp.reward(s, a));
        s = mdp.next(s, a);
    }
    let r = v_star[start] - (discounted(&plan_r, g) + gh * v_pi[plan_end]);
    let lr = v_star[s] - v_pi[plan_end];
    let sr = discounted(&opt_r, g) - discounted(&plan_r, g);
    let eps_v = v_hat
        .iter()
        .zip(&v_pi)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let eps_p = v_star
        .iter()
        .zip(&v_pi)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let bound = 2.0 * mdp.r_max * (1.0 - gh) / (gh * (1.0 - g)) + 2.0 * eps_v + eps_p;

    let rep = regret_report(mdp, start, h, v_hat).unwrap();
    assert!(close(rep.r, r), "R {} vs {r}", rep.r);
    assert!(close(rep.sr, sr), "SR {} vs {sr}", rep.sr);
    assert!(close(rep.eps_v, eps_v) && close(rep.eps_p, eps_p));
    assert!(close(rep.bound, bound));
    // Continuous random rewards make the optimal path unique.
    assert!(close(rep.lr, lr), "LR {} vs {lr}", rep.lr);
    assert!((rep.r - (gh * rep.lr + rep.sr)).abs() < 1e-9);
    assert!(
        rep.lr <= rep.bound + 1e-9,
        "LR {} > bound {}",
        rep.lr,
        rep.bound
    );
    rep
}
