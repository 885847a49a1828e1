mod common;

use common::Fixture;
use dhm_core::dataset::generate_synthetic;
use dhm_core::dhm::{
    apply_boost, apply_split, labeling_loss, loss_terms, predict_labels, price, transition, Action, BoostLearner,
};
use dhm_core::{FeatureSet, WeakLearner};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn learners(fx: &Fixture) -> Vec<WeakLearner> {
    common::fitted_learners(fx, &[0.0, 0.5, 1e9])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_preserves_cross_entropy(seed in 0u64..100_000, theta in 0.0f64..1.0) {
        let sample = generate_synthetic(&common::spec(seed % 50, 24), 1).unwrap().samples.remove(0);
        let tree = common::tree_of(&sample);
        let fx = Fixture::new(1, 16, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = common::random_state(&tree, &mut rng);
        let next = apply_split(&state, theta, &tree, &fx.costs);
        let (ce0, mix0) = loss_terms(&state, &tree);
        let (ce1, mix1) = loss_terms(&next, &tree);
        prop_assert!((ce0 - ce1).abs() <= 1e-9);
        prop_assert!(mix1 <= mix0 + 1e-9);
        prop_assert!(labeling_loss(&next, &tree, 1.0) <= labeling_loss(&state, &tree, 1.0) + 1e-9);
        prop_assert_eq!(predict_labels(&next, &tree), predict_labels(&state, &tree));
    }

    #[test]
    fn loss_matches_pixel_oracle(seed in 0u64..100_000, weight in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = generate_synthetic(&common::spec(seed % 50, 16), 1).unwrap().samples.remove(0);
        let sample = common::with_void(sample, &mut rng);
        let tree = common::tree_of(&sample);
        let state = common::random_state(&tree, &mut rng);
        let expected = common::pixel_loss(&state, &tree, &sample.labels, weight);
        let got = labeling_loss(&state, &tree, weight);
        prop_assert!((got - expected).abs() <= 1e-8 * expected.abs().max(1e-12));
    }

    #[test]
    fn prediction_ignores_positive_rescaling(seed in 0u64..100_000) {
        let sample = generate_synthetic(&common::spec(seed % 50, 16), 1).unwrap().samples.remove(0);
        let tree = common::tree_of(&sample);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = common::random_state(&tree, &mut rng);
        let mut scaled = state.clone();
        for leaf in scaled.leaves.iter_mut() {
            let f = rng.gen_range(0.01..100.0);
            leaf.q.iter_mut().for_each(|v| *v *= f);
        }
        prop_assert_eq!(predict_labels(&scaled, &tree), predict_labels(&state, &tree));
    }
}

#[test]
fn random_boosts_keep_valid_marginals() {
    let fx = Fixture::new(4, 32, 3);
    let base = learners(&fx);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..1000 {
        let scene = &fx.scenes[i % fx.scenes.len()];
        let mut learner = base[i % base.len()].clone();
        learner.alpha = rng.gen_range(0.0..8.0);
        let state = common::random_state(&scene.tree, &mut rng);
        let next = apply_boost(&state, &learner, &scene.episode(&fx.costs));
        for (a, b) in state.leaves.iter().zip(&next.leaves) {
            assert_eq!(a.node, b.node);
            common::assert_distribution(&b.q, 1e-9);
            if !a.active {
                assert_eq!(a.q, b.q);
            }
        }
    }
}

#[test]
fn trajectory_cost_charges_each_feature_once() {
    let fx = Fixture::new(3, 32, 5);
    let pool: Vec<BoostLearner> = learners(&fx).into_iter().map(|l| BoostLearner { stages: vec![l] }).collect();
    let actions = [
        Action::Split { theta: 0.0 },
        Action::Boost { learner: 0 },
        Action::Split { theta: 0.3 },
        Action::Boost { learner: 1 },
        Action::Boost { learner: 0 },
        Action::Split { theta: 0.6 },
        Action::Boost { learner: 2 },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for scene in &fx.scenes {
        let env = fx.env();
        let episode = scene.episode(&fx.costs);
        let mut state = env.start(scene);
        assert_eq!(state.cost, fx.costs.initial_cost);
        let (mut splits, mut boosts, mut used) = (0.0, 0usize, FeatureSet::empty());
        for _ in 0..20 {
            let a = actions[rng.gen_range(0..actions.len())];
            let quoted = price(&state, &a, &episode, &pool);
            let next = transition(&state, &a, &episode, &pool);
            assert_eq!(next.digest(), transition(&state, &a, &episode, &pool).digest());
            assert!((next.cost - state.cost - quoted).abs() <= 1e-12);
            assert!(next.cost >= state.cost);
            assert!(state.used.difference(next.used).is_empty());
            match a {
                Action::Split { .. } => splits += quoted,
                Action::Boost { learner } => {
                    boosts += 1;
                    used = used.union(pool[learner].features());
                }
            }
            state = next;
        }
        let features: f64 = used.iter().map(|i| fx.costs.feature_costs[i]).sum();
        let expected = fx.costs.initial_cost + splits + boosts as f64 * fx.costs.learner_cost + features;
        assert!((state.cost - expected).abs() <= 1e-9);
        assert_eq!(state.used, used);
    }
}
