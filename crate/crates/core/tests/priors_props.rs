#![allow(clippy::needless_range_loop)]

mod common;

use aop_core::envs::{EnvModel, MazeParams, MazeState, MazeWorld, RewardMode};
use aop_core::nn::Mlp;
use aop_core::planner::{prior_rollout, PriorPolicy};
use aop_core::priors::{
    bc_update, td3_update, BcConfig, BcPrior, PolicyBuffer, RecordSource, Td3Config, Td3Prior,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::median;

/// Static buffer of a smooth, bounded state-to-action map.
fn static_buffer(rng: &mut ChaCha8Rng, n: usize) -> PolicyBuffer {
    let mut buf = PolicyBuffer::new(4, 2, 10_000);
    for _ in 0..n {
        let o: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
        let a = [(3.0 * o[0] - o[2]).sin() * 0.8, (o[1] * o[3] - 0.3).tanh()];
        buf.push(RecordSource::FinalPlan, &o, &a, 0.0, &o);
    }
    buf
}

/// Mean squared error of the unclamped policy over the whole buffer.
fn full_bc_loss(prior: &BcPrior, buf: &PolicyBuffer) -> f64 {
    let ring = &buf.final_plan;
    let mut total = 0.0;
    for i in 0..ring.len() {
        let tr = ring.get(i);
        let y = prior.policy.forward(tr.obs).unwrap();
        total += y
            .iter()
            .zip(tr.action)
            .map(|(p, a)| (p - a).powi(2))
            .sum::<f64>()
            / 2.0;
    }
    total / ring.len() as f64
}

#[test]
fn bc_loss_median_over_ten_seeds_never_increases() {
    let rounds = 8;
    let mut curves = vec![Vec::new(); rounds + 1];
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let buf = static_buffer(&mut rng, 800);
        let mut prior = BcPrior::new(4, 2, &BcConfig::default(), 1.0, &mut rng).unwrap();
        curves[0].push(full_bc_loss(&prior, &buf));
        for r in 1..=rounds {
            bc_update(&mut prior, &buf, 100, 64, &mut rng).unwrap();
            curves[r].push(full_bc_loss(&prior, &buf));
        }
    }
    let medians: Vec<f64> = curves.iter().map(|c| median(c)).collect();
    for w in medians.windows(2) {
        assert!(w[1] <= w[0], "median loss went up: {medians:?}");
    }
    assert!(medians[rounds] < 0.5 * medians[0]);
}

#[test]
fn bc_needs_final_plan_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut buf = PolicyBuffer::new(4, 2, 100);
    buf.push(
        RecordSource::Population,
        &[0.0; 4],
        &[0.0; 2],
        0.0,
        &[0.0; 4],
    );
    let mut prior = BcPrior::new(4, 2, &BcConfig::default(), 1.0, &mut rng).unwrap();
    assert!(bc_update(&mut prior, &buf, 10, 8, &mut rng).is_err());
}

fn td3_fixture(seed: u64) -> (Td3Prior, PolicyBuffer, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = PolicyBuffer::new(3, 1, 1000);
    for _ in 0..300 {
        let o: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = [rng.random_range(-1.0..1.0)];
        let n: Vec<f64> = o.iter().map(|x| 0.9 * x).collect();
        let source = if rng.random_bool(0.5) {
            RecordSource::FinalPlan
        } else {
            RecordSource::Population
        };
        buf.push(source, &o, &a, -o[0].abs(), &n);
    }
    let prior = Td3Prior::new(3, 1, Td3Config::default(), 1.0, &mut rng).unwrap();
    (prior, buf, rng)
}

#[test]
fn actor_waits_for_the_policy_delay() {
    let (mut prior, buf, mut rng) = td3_fixture(2);
    let actor = prior.actor.clone();
    let q1 = prior.q1.clone();
    let targets = (prior.actor_target.clone(), prior.q1_target.clone());
    td3_update(&mut prior, &buf, 1, 100, &mut rng).unwrap();
    assert_eq!(prior.actor, actor);
    assert_ne!(prior.q1, q1);
    assert_eq!(
        (prior.actor_target.clone(), prior.q1_target.clone()),
        targets
    );
    td3_update(&mut prior, &buf, 1, 100, &mut rng).unwrap();
    assert_ne!(prior.actor, actor);
}

#[test]
fn targets_are_moving_averages_of_live_nets() {
    let (mut prior, buf, mut rng) = td3_fixture(3);
    let tau = prior.cfg.tau;
    let old = [
        prior.actor_target.clone(),
        prior.q1_target.clone(),
        prior.q2_target.clone(),
    ];
    td3_update(&mut prior, &buf, 2, 100, &mut rng).unwrap();
    let live = [&prior.actor, &prior.q1, &prior.q2];
    let new = [&prior.actor_target, &prior.q1_target, &prior.q2_target];
    for ((o, l), n) in old.iter().zip(live).zip(new) {
        for ((a, b), c) in o.params().iter().zip(l.params()).zip(n.params()) {
            assert!(((1.0 - tau) * a + tau * b - c).abs() < 1e-14);
        }
    }
}

#[test]
fn target_gap_shrinks_by_one_minus_tau() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let live = Mlp::new(&[3, 16, 1], &mut rng).unwrap();
    let mut target = Mlp::new(&[3, 16, 1], &mut rng).unwrap();
    let gap = |t: &Mlp| -> f64 {
        t.params()
            .iter()
            .zip(live.params())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut prev = gap(&target);
    for _ in 0..50 {
        target.soft_update_from(&live, 0.005).unwrap();
        let g = gap(&target);
        assert!((g / prev - 0.995).abs() < 1e-9);
        prev = g;
    }
}

#[test]
fn td3_needs_a_full_batch() {
    let (mut prior, _, mut rng) = td3_fixture(5);
    let mut small = PolicyBuffer::new(3, 1, 10);
    small.push(RecordSource::Population, &[0.0; 3], &[0.0], 0.0, &[0.0; 3]);
    assert!(td3_update(&mut prior, &small, 4, 100, &mut rng).is_err());
}

#[test]
fn zero_policy_rollout_is_passive_dynamics() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut prior = BcPrior::new(4, 2, &BcConfig::default(), 1.0, &mut rng).unwrap();
    prior.policy = Mlp::zeros(prior.policy.layer_sizes()).unwrap();
    let p = MazeParams::default();
    let model = EnvModel {
        world: MazeWorld::open(RewardMode::Dense, &p),
        state: MazeState::at([0.3, 0.6]),
    };
    let traj = prior_rollout(&prior, &model, model.state, 30).unwrap();
    let passive = model.rollout(model.state, &[0.0; 60]);
    assert_eq!(traj.states, passive.states);
    assert_eq!(traj.rewards, passive.rewards);
    assert_eq!(
        prior_rollout(&prior, &model, model.state, 0)
            .unwrap()
            .states
            .len(),
        1
    );

    let mut a = [0.0; 2];
    prior.act_into(&[0.1, 0.2, 0.3, 0.4], &mut a).unwrap();
    assert_eq!(a, [0.0, 0.0]);
}
