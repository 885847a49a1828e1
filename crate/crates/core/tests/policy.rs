mod common;

use common::Fixture;
use dhm_core::dhm::Prior;
use dhm_core::policy::{
    clipped_targets, greedy_static_policy, lspi_train, policy_evaluate, policy_improve, random_policy, state_features,
    LspiConfig, MetaLayout, QSample, RolloutConfig,
};
use dhm_core::{Action, ActionPool, BoostLearner, FeatureSet, Policy, PolicyWeights, Scene};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn hand_recursion(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut q = rewards.to_vec();
    for t in (0..n.saturating_sub(1)).rev() {
        q[t] = rewards[t] + gamma * if q[t + 1] > 0.0 { q[t + 1] } else { 0.0 };
    }
    q
}

fn weights(eta: Vec<f64>, layout: MetaLayout, pool: &ActionPool) -> PolicyWeights {
    PolicyWeights {
        eta,
        layout,
        noise: 0.0,
        seed: 0,
        pool_hash: pool.content_hash(),
    }
}

/// Copies of `scene` under distinct ids, so seeded choices differ per copy.
fn renamed(scene: &Scene, n: usize) -> Vec<Scene> {
    (0..n)
        .map(|i| {
            let mut s = scene.clone();
            s.id = format!("copy{i}");
            s
        })
        .collect()
}

proptest! {
    #[test]
    fn clipped_targets_follow_recursion(
        rewards in prop::collection::vec(-2.0f64..2.0, 1..12),
        gamma in prop::sample::select(vec![0.0, 0.5, 0.9, 1.0]),
    ) {
        let q = clipped_targets(&rewards, gamma);
        prop_assert_eq!(&q, &hand_recursion(&rewards, gamma));
        prop_assert_eq!(q[rewards.len() - 1], rewards[rewards.len() - 1]);
        if gamma == 1.0 && rewards.iter().all(|&r| r >= 0.0) {
            prop_assert!((q[0] - rewards.iter().sum::<f64>()).abs() <= 1e-12);
        }
    }
}

#[test]
fn worked_clipped_example() {
    assert_eq!(clipped_targets(&[1.0, -2.0, 3.0], 0.5), vec![1.0, -0.5, 3.0]);
}

#[test]
fn evaluated_samples_satisfy_recursion() {
    let fx = Fixture::new(4, 32, 2);
    let pool = common::toy_pool(&fx);
    let runner = common::runner(&fx, &pool, RolloutConfig::default());
    let scenes = fx.refs();
    for gamma in [0.0, 0.5, 0.9, 1.0] {
        let samples = policy_evaluate(&random_policy(4), &scenes, &runner, gamma, None).unwrap();
        let mut training = runner;
        training.cfg.stop_on_nonpositive_reward = true;
        for scene in &scenes {
            let traj = training.rollout(&random_policy(4), scene, f64::INFINITY, None, true);
            let q: Vec<f64> = samples.iter().filter(|s| s.image == scene.id).map(|s| s.q).collect();
            assert_eq!(q, hand_recursion(&traj.rewards, gamma));
            assert!(traj.rewards[..traj.rewards.len() - 1].iter().all(|&r| r > 0.0));
        }
    }
}

fn sample_set(n: usize, d: usize, seed: u64) -> Vec<QSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| QSample {
            phi: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            q: rng.gen_range(-1.0..2.0),
            image: format!("img{i}"),
            step: 0,
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn ridge_limits_and_identifiability() {
    let samples = sample_set(200, 12, 1);
    let loose = policy_improve(&samples, 0.01).unwrap();
    assert!(norm(&policy_improve(&samples, 1e9).unwrap()) < 1e-6 * norm(&loose));

    let doubled: Vec<QSample> = samples.iter().chain(&samples).cloned().collect();
    let twice = policy_improve(&doubled, 0.01).unwrap();
    assert!(loose.iter().zip(&twice).all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0)));

    let truth = [0.3, -1.2, 2.5, 0.0, 0.7];
    let one_hot: Vec<QSample> = (0..50)
        .map(|i| {
            let a = i % truth.len();
            let mut phi = vec![0.0; truth.len()];
            phi[a] = 1.0;
            QSample {
                phi,
                q: truth[a],
                image: String::new(),
                step: i,
            }
        })
        .collect();
    let eta = policy_improve(&one_hot, 1e-10).unwrap();
    for (e, t) in eta.iter().zip(truth) {
        assert!((e - t).abs() <= 1e-6);
    }
}

#[test]
fn random_policy_is_uniform_and_reproducible() {
    let fx = Fixture::new(1, 32, 4);
    let pool = common::toy_pool(&fx);
    let runner = common::runner(&fx, &pool, RolloutConfig::default());
    let copies = renamed(&fx.scenes[0], 250);
    let mut counts = [0usize; 4];
    for scene in &copies {
        let traj = runner.rollout(&random_policy(3), scene, f64::INFINITY, None, false);
        assert_eq!(traj.actions.len(), 40);
        assert_eq!(traj, runner.rollout(&random_policy(3), scene, f64::INFINITY, None, false));
        traj.actions.iter().for_each(|&a| counts[a] += 1);
    }
    let total: usize = counts.iter().sum();
    assert_eq!(total, 10_000);
    for c in counts {
        assert!((c as f64 / total as f64 - 0.25).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn single_action_static_policy_repeats_until_no_gain() {
    let fx = Fixture::new(3, 32, 6);
    let learner = common::fitted_learners(&fx, &[0.0]).remove(0);
    let pool = ActionPool::from_actions(
        vec![Action::Split { theta: 0.0 }],
        vec![BoostLearner { stages: vec![learner] }],
    )
    .unwrap();
    let env = fx.env();
    let scenes = fx.refs();
    let seq = greedy_static_policy(&pool, &scenes, &env, 40).unwrap();
    assert!(seq.iter().all(|&i| i == 0));
    let mut states: Vec<_> = scenes.iter().map(|s| env.start(s)).collect();
    for _ in 0..seq.len() {
        let rewards: Vec<f64> = states
            .iter_mut()
            .zip(&scenes)
            .map(|(st, sc)| {
                let (n, r) = env.step(st, pool.action(0), sc, &pool.learners);
                *st = n;
                r
            })
            .collect();
        assert!(rewards.iter().sum::<f64>() > 0.0);
    }
    if seq.len() < 40 {
        let next: f64 = states
            .iter()
            .zip(&scenes)
            .map(|(st, sc)| env.step(st, pool.action(0), sc, &pool.learners).1)
            .sum();
        assert!(next <= 0.0);
    }
    assert_eq!(seq, greedy_static_policy(&pool, &scenes, &env, 40).unwrap());
}

#[test]
fn static_sequence_beats_single_step_perturbations() {
    let fx = Fixture::new(3, 32, 8);
    let pool = common::toy_pool(&fx);
    let env = fx.env();
    let scenes = fx.refs();
    let seq = greedy_static_policy(&pool, &scenes, &env, 6).unwrap();
    assert!(!seq.is_empty());
    let mut states: Vec<_> = scenes.iter().map(|s| env.start(s)).collect();
    for &chosen in &seq {
        let mean_reward = |a: usize| -> f64 {
            states
                .iter()
                .zip(&scenes)
                .map(|(st, sc)| env.step(st, pool.action(a), sc, &pool.learners).1)
                .sum::<f64>()
                / scenes.len() as f64
        };
        let best = mean_reward(chosen);
        for a in 0..pool.len() {
            assert!(mean_reward(a) <= best);
        }
        for (st, sc) in states.iter_mut().zip(&scenes) {
            *st = env.step(st, pool.action(chosen), sc, &pool.learners).0;
        }
    }
}

#[test]
fn initial_meta_features() {
    let fx = Fixture::new(1, 32, 9);
    let pool = common::toy_pool(&fx);
    let runner = common::runner(&fx, &pool, RolloutConfig::default());
    let scene = &fx.scenes[0];
    let uniform = Prior::Uniform;
    let env = dhm_core::Env {
        prior: &uniform,
        ..fx.env()
    };
    let state = env.start(scene);
    let block = state_features(&state, None, &scene.tree, &runner.layout);
    assert_eq!(block.len(), runner.layout.state_dim());
    assert_eq!(block[0], 1.0);
    assert!((block[1] - 1.0).abs() <= 1e-12);
    assert_eq!(block[2], 0.0);

    let phis = runner.all_features(&state, None, &[0; 4], scene);
    assert!(phis.iter().all(|p| p.len() == runner.layout.dim()));
    let used_all = dhm_core::DhmState {
        used: FeatureSet((1 << fx.registry.len()) - 1),
        ..state.clone()
    };
    let f = runner.layout.num_features;
    let phis = runner.all_features(&used_all, None, &[0; 4], scene);
    for (i, phi) in phis.iter().enumerate().filter(|(i, _)| !pool.action(*i).is_split()) {
        let o = i * runner.layout.slot_dim() + runner.layout.state_dim();
        assert!(phi[o..o + f].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn rollouts_respect_pool_budget_and_feature_monotonicity() {
    let fx = Fixture::new(4, 32, 10);
    let pool = common::toy_pool(&fx);
    let runner = common::runner(&fx, &pool, RolloutConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = runner.layout.num_features;
    for trial in 0..8 {
        let eta: Vec<f64> = (0..runner.layout.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let linear = Policy::Linear(weights(eta.clone(), runner.layout, &pool));
        let scaled = Policy::Linear(weights(eta.iter().map(|v| v * 3.7).collect(), runner.layout, &pool));
        for scene in &fx.scenes {
            let traj = runner.rollout(&linear, scene, f64::INFINITY, None, true);
            assert!(traj.actions.iter().all(|&a| a < pool.len()));
            assert_eq!(traj.actions, runner.rollout(&scaled, scene, f64::INFINITY, None, false).actions);
            for w in traj.features.windows(2).zip(traj.actions.windows(2)) {
                let (phis, acts) = w;
                let used = |phi: &[f64], a: usize| {
                    let o = a * runner.layout.slot_dim() + 3;
                    phi[o..o + f].to_vec()
                };
                let (a, b) = (used(&phis[0], acts[0]), used(&phis[1], acts[1]));
                if phis[0].iter().any(|&v| v != 0.0) && phis[1].iter().any(|&v| v != 0.0) {
                    assert!(a.iter().zip(&b).all(|(x, y)| x <= y), "trial {trial}");
                }
            }
            for s in traj.states.windows(2) {
                assert!(s[0].used.difference(s[1].used).is_empty());
                assert!(s[1].cost >= s[0].cost);
            }
            let budget_runs = [fx.costs.initial_cost, traj.final_state().cost * 0.5, traj.final_state().cost];
            for budget in budget_runs {
                let cut = runner.rollout(&linear, scene, budget, None, false);
                let n = traj.steps_within(budget);
                assert_eq!(cut.actions, traj.actions[..n]);
                assert_eq!(cut.final_state(), &traj.states[n]);
            }
            assert!(runner.rollout(&linear, scene, fx.costs.initial_cost, None, false).actions.is_empty());
        }
    }
}

#[test]
fn lspi_is_deterministic_and_never_worse_than_its_start() {
    let fx = Fixture::new(8, 32, 12);
    let pool = common::toy_pool(&fx);
    let runner = common::runner(&fx, &pool, RolloutConfig::default());
    let scenes = fx.refs();
    let (train, val) = scenes.split_at(5);
    let cfg = LspiConfig {
        max_iters: 3,
        ..LspiConfig::default()
    };
    let a = lspi_train(train, val, &runner, &cfg).unwrap();
    let b = lspi_train(train, val, &runner, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.val_auc >= a.history[0].val_auc - cfg.tol);
    assert_eq!(a.weights.eta.len(), runner.layout.dim());

    let zero = lspi_train(train, val, &runner, &LspiConfig { max_iters: 0, ..cfg.clone() }).unwrap();
    assert_eq!(zero.history.len(), 1);
    let init = Policy::Static(greedy_static_policy(&pool, train, &runner.env, runner.cfg.horizon).unwrap());
    let samples = policy_evaluate(&init, train, &runner, cfg.gamma, None).unwrap();
    assert_eq!(zero.weights.eta, policy_improve(&samples, cfg.beta).unwrap());
}
