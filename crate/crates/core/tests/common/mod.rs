#![allow(dead_code)]

use dhm_core::dataset::{generate_synthetic, label_prior};
use dhm_core::dhm::{DhmState, Leaf, Prior};
use dhm_core::pipeline::build_scene;
use dhm_core::segtree::{annotate_ground_truth, build_hierarchy};
use dhm_core::{CostModel, Env, FeatureRegistry, FeatureSet, HierarchyConfig, ImageSample, Scene, SegTree, SyntheticSpec};
use rand::Rng;

pub fn spec(seed: u64, side: usize) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        height: side,
        width: side,
        ..SyntheticSpec::default()
    }
}

pub fn tree_of(sample: &ImageSample) -> SegTree {
    let tree = build_hierarchy(sample, &HierarchyConfig::default()).unwrap();
    annotate_ground_truth(tree, sample).unwrap()
}

/// Small synthetic images with trees, features and a cost model.
pub struct Fixture {
    pub samples: Vec<ImageSample>,
    pub scenes: Vec<Scene>,
    pub registry: FeatureRegistry,
    pub costs: CostModel,
    pub prior: Prior,
}

impl Fixture {
    pub fn new(count: usize, side: usize, seed: u64) -> Self {
        let samples = generate_synthetic(&spec(seed, side), count).unwrap().samples;
        let registry = FeatureRegistry::default_six();
        let costs = CostModel::new(&registry, 0.02, 0.25, 2.0).unwrap();
        let scenes = samples
            .iter()
            .map(|s| build_scene(s, tree_of(s), &registry).unwrap())
            .collect();
        let prior = Prior::Global(label_prior(&samples, 4));
        Self {
            samples,
            scenes,
            registry,
            costs,
            prior,
        }
    }

    pub fn env(&self) -> Env<'_> {
        Env {
            costs: &self.costs,
            prior: &self.prior,
            loss_weight: 1.0,
        }
    }

    pub fn refs(&self) -> Vec<&Scene> {
        self.scenes.iter().collect()
    }
}

pub fn random_marginal(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0f64).powi(3)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// A random tree cut with random marginals and a random active set.
pub fn random_state(tree: &SegTree, rng: &mut impl Rng) -> DhmState {
    let k = tree.num_classes;
    let depth_bias = rng.gen_range(0.2..0.9);
    let mut frontier = vec![tree.root()];
    let mut cut = Vec::new();
    while let Some(id) = frontier.pop() {
        let node = &tree.nodes[id];
        if !node.children.is_empty() && rng.gen_bool(depth_bias) {
            frontier.extend(&node.children);
        } else {
            cut.push(id);
        }
    }
    cut.sort_unstable();
    DhmState {
        leaves: cut
            .into_iter()
            .map(|node| Leaf {
                node,
                q: random_marginal(k, rng),
                parent_q: if rng.gen_bool(0.5) { Some(random_marginal(k, rng)) } else { None },
                active: rng.gen_bool(0.5),
            })
            .collect(),
        step: rng.gen_range(0..5),
        cost: rng.gen_range(0.0..10.0),
        used: FeatureSet(rng.gen_range(0..64)),
    }
}

pub fn assert_distribution(q: &[f64], tol: f64) {
    let s: f64 = q.iter().sum();
    assert!((s - 1.0).abs() <= tol, "marginal sums to {s}");
    assert!(q.iter().all(|&v| v > 0.0 && v.is_finite()), "invalid entry in {q:?}");
}

/// Labeling loss recomputed from pixels: per-pixel cross-entropy of the
/// covering leaf's marginal plus `weight` times the region label entropy.
pub fn pixel_loss(state: &DhmState, tree: &SegTree, labels: &[u8], weight: f64) -> f64 {
    let total = labels.iter().filter(|&&l| l != dhm_core::VOID).count() as f64;
    let mut loss = 0.0;
    for leaf in &state.leaves {
        let mut counts = vec![0.0; tree.num_classes];
        for p in tree.pixels_of(leaf.node) {
            let l = labels[p];
            if l != dhm_core::VOID {
                counts[l as usize] += 1.0;
                loss -= leaf.q[l as usize].max(dhm_core::dhm::LOSS_LOG_FLOOR).ln() / total;
            }
        }
        let n: f64 = counts.iter().sum();
        for c in counts.iter().filter(|&&c| c > 0.0) {
            loss -= weight * (c / total) * (c / n).ln();
        }
    }
    loss
}

/// `sample` with a random tenth of its labels set to VOID.
pub fn with_void(mut sample: ImageSample, rng: &mut impl Rng) -> ImageSample {
    for l in sample.labels.iter_mut() {
        if rng.gen_bool(0.1) {
            *l = dhm_core::VOID;
        }
    }
    sample
}

/// Learners fitted on the regions one split below the root, one per lambda.
pub fn fitted_learners(fx: &Fixture, lambdas: &[f64]) -> Vec<dhm_core::WeakLearner> {
    let env = fx.env();
    let scenes = fx.refs();
    let states: Vec<DhmState> = scenes
        .iter()
        .map(|s| dhm_core::dhm::apply_split(&env.start(s), 0.0, &s.tree, &fx.costs))
        .collect();
    let samples = dhm_core::policy::residual_samples(&states, &scenes);
    lambdas
        .iter()
        .map(|&lambda| {
            dhm_core::boost::fit_weak_learner(
                &samples,
                lambda,
                FeatureSet::empty(),
                &fx.registry,
                &fx.costs,
                &dhm_core::BoostConfig::default(),
            )
            .unwrap()
        })
        .collect()
}

/// Two splits and two single-stage boosts.
pub fn toy_pool(fx: &Fixture) -> dhm_core::ActionPool {
    use dhm_core::Action;
    let learners = fitted_learners(fx, &[0.0, 1e9])
        .into_iter()
        .map(|l| dhm_core::BoostLearner { stages: vec![l] })
        .collect();
    dhm_core::ActionPool::from_actions(
        vec![
            Action::Split { theta: 0.6 },
            Action::Split { theta: 0.3 },
            Action::Boost { learner: 0 },
            Action::Boost { learner: 1 },
        ],
        learners,
    )
    .unwrap()
}

pub fn runner<'a>(fx: &'a Fixture, pool: &'a dhm_core::ActionPool, cfg: dhm_core::policy::RolloutConfig) -> dhm_core::Runner<'a> {
    dhm_core::Runner::new(fx.env(), pool, &fx.registry, HierarchyConfig::default().layers, cfg)
}
