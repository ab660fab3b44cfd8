#![allow(clippy::needless_range_loop)]

mod common;

use aop_core::ensemble::{log_sum_exp_aggregate, population_std, ValueEnsemble};
use aop_core::nn::Mlp;
use aop_core::regret::{value_iteration, TabularMdp};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{naive_lse, random_ensemble};

#[test]
fn aggregate_between_mean_and_max_on_1000_cases() {
    for seed in 0..1000 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kappa = 10f64.powf(rng.random_range(-4.0..1.0));
        let ens = random_ensemble(&mut rng, 4, kappa, 2.5);
        let obs: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v = ens.member_values(&obs).unwrap();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let agg = ens.aggregate(&obs).unwrap();
        assert!(
            mean - 1e-12 <= agg && agg <= max + 1e-12,
            "seed {seed}: {mean} {agg} {max}"
        );
    }
}

#[test]
fn tiny_kappa_recovers_the_mean() {
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // The gap to the mean is about κ·var/2, so keep values O(10).
        let ens = random_ensemble(&mut rng, 3, 1e-8, 1.0);
        let obs: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = ens.member_values(&obs).unwrap();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((ens.aggregate(&obs).unwrap() - mean).abs() < 1e-6);
    }
}

#[test]
fn closed_form_aggregates() {
    let expected = 100.0 * (0.5 * (1.0 + 0.1f64.exp())).ln();
    assert!((log_sum_exp_aggregate(&[0.0, 10.0], 0.01) - expected).abs() < 1e-12);
    assert!((expected - 5.1249).abs() < 1e-4);
    assert!((log_sum_exp_aggregate(&[0.0, 10.0], 10.0) - 10.0).abs() < 0.07);
    assert_eq!(population_std(&[1.0, 3.0]), 1.0);
}

proptest! {
    #[test]
    fn lse_matches_literal_formula(
        values in prop::collection::vec(-50.0f64..50.0, 1..10),
        kappa in 1e-3f64..2.0,
    ) {
        let fast = log_sum_exp_aggregate(&values, kappa);
        let slow = naive_lse(&values, kappa);
        prop_assert!((fast - slow).abs() <= 1e-9 * (1.0 + slow.abs()), "{fast} vs {slow}");
    }

    #[test]
    fn lse_bounds_hold_for_extreme_values(
        values in prop::collection::vec(-1e6f64..1e6, 1..10),
        kappa in 1e-8f64..1e3,
    ) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let agg = log_sum_exp_aggregate(&values, kappa);
        prop_assert!(agg.is_finite());
        prop_assert!(mean - 1e-12 <= agg && agg <= max + 1e-12);
    }

    #[test]
    fn identical_members_aggregate_to_their_value(c in -100.0f64..100.0, n in 1usize..8, kappa in 1e-4f64..10.0) {
        let values = vec![c; n];
        prop_assert_eq!(log_sum_exp_aggregate(&values, kappa), c);
        prop_assert!(population_std(&values) <= 1e-13 * c.abs());
    }
}

/// Members that are exactly the optimal value table of a small chain MDP,
/// read through one-hot observations.
#[test]
fn bellman_error_vanishes_for_true_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 7;
    let gamma = 0.9;
    // Deterministic ring with two actions: stay or move on.
    let mut next = Vec::new();
    let mut reward = Vec::new();
    for s in 0..n {
        next.extend([s, (s + 1) % n]);
        reward.extend([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
    }
    let mdp = TabularMdp::new(n, 2, next, reward, gamma, 1.0).unwrap();
    let (v, pi) = value_iteration(&mdp);
    let mut params = v.clone();
    params.push(0.0);
    let member = Mlp::from_params(&[n, 1], params).unwrap();
    let ens = ValueEnsemble::from_members(vec![member; 4], 0.01, gamma, 1e-3);

    let h_full = 12;
    let mut s = 2;
    let mut obs = Array2::zeros((h_full + 1, n));
    let mut rewards = Vec::new();
    obs[[0, s]] = 1.0;
    for k in 0..h_full {
        rewards.push(mdp.reward(s, pi[s]));
        s = mdp.next(s, pi[s]);
        obs[[k + 1, s]] = 1.0;
    }
    let (eps, stats) = ens.bellman_errors(&rewards, obs.view()).unwrap();
    for (h, e) in eps.iter().enumerate() {
        assert!(*e < 1e-20, "eps({h}) = {e}");
        let single = ens.bellman_error(&rewards, obs.view(), h, h_full).unwrap();
        assert!(single < 1e-20);
    }
    assert!(stats.iter().all(|st| st.std == 0.0));
}

#[test]
fn recursion_matches_direct_segment_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ens = random_ensemble(&mut rng, 3, 0.01, 1.0);
    let h_full = 20;
    let obs = common::random_matrix(&mut rng, h_full + 1, 3);
    let rewards: Vec<f64> = (0..h_full).map(|_| rng.random_range(-1.0..0.0)).collect();
    let (eps, _) = ens.bellman_errors(&rewards, obs.view()).unwrap();
    let gamma = ens.gamma();
    let terminal = ens.aggregate(obs.row(h_full).as_slice().unwrap()).unwrap();
    for h in 0..=h_full {
        let head = ens.member_values(obs.row(h).as_slice().unwrap()).unwrap();
        let head_mean = head.iter().sum::<f64>() / head.len() as f64;
        let seg: f64 = (h..h_full)
            .map(|k| gamma.powi((k - h) as i32) * rewards[k])
            .sum::<f64>()
            + gamma.powi((h_full - h) as i32) * terminal;
        let direct = (seg - head_mean).powi(2);
        assert!((eps[h] - direct).abs() <= 1e-9 * (1.0 + direct), "h={h}");
    }
    assert!(ens
        .bellman_error(&rewards, obs.view(), h_full + 1, h_full)
        .is_err());
}
