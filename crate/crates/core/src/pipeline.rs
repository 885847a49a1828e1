//! End-to-end orchestration: data, trees and features, action proposal,
//! policy training, and method comparison on the test split.

use serde::{Deserialize, Serialize};

use crate::config::{PriorKind, RunConfig};
use crate::dataset::{generate_synthetic, label_prior, load_dataset, split_dataset, Dataset, ImageSample, Split};
use crate::dhm::Prior;
use crate::error::{Error, Result};
use crate::eval::{anytime_curve, auc, budget_grid, mean_full_cost, MetricCurve};
use crate::features::{CostModel, FeatureRegistry, ImageFeatures};
use crate::policy::{
    greedy_static_policy, lspi_train, propose_actions, random_policy, ActionPool, Env, LspiOutcome, Policy,
    PolicyWeights, Runner, Scene,
};
use crate::segtree::{annotate_ground_truth, build_hierarchy, SegTree};

/// Reads or generates the images and assigns the splits.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let dataset = match (&d.root, &d.synthetic) {
        (Some(root), _) => load_dataset(root, d.num_classes)?,
        (None, Some(spec)) => generate_synthetic(spec, d.count)?,
        (None, None) => return Err(Error::Config("data needs either root or synthetic".into())),
    };
    split_dataset(dataset, d.fractions, d.split_seed)
}

pub fn build_tree(sample: &ImageSample, cfg: &RunConfig) -> Result<SegTree> {
    annotate_ground_truth(build_hierarchy(sample, &cfg.hierarchy)?, sample)
}

pub fn build_scene(sample: &ImageSample, tree: SegTree, registry: &FeatureRegistry) -> Result<Scene> {
    let features = ImageFeatures::extract(registry, sample, &tree)?;
    Ok(Scene::new(sample, tree, features))
}

/// Loaded data with one scene per image, in dataset order.
pub struct Prepared {
    pub dataset: Dataset,
    pub scenes: Vec<Scene>,
    pub registry: FeatureRegistry,
    pub costs: CostModel,
    pub prior: Prior,
}

impl Prepared {
    /// Builds every tree from scratch.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let dataset = load_data(cfg)?;
        let trees = dataset
            .samples
            .iter()
            .map(|s| build_tree(s, cfg))
            .collect::<Result<Vec<_>>>()?;
        Self::with_trees(cfg, dataset, trees)
    }

    pub fn with_trees(cfg: &RunConfig, dataset: Dataset, trees: Vec<SegTree>) -> Result<Self> {
        let registry = cfg.registry()?;
        let costs = cfg.cost_model()?;
        let scenes = dataset
            .samples
            .iter()
            .zip(trees)
            .map(|(s, t)| build_scene(s, t, &registry))
            .collect::<Result<Vec<_>>>()?;
        let prior = match cfg.prior {
            PriorKind::Uniform => Prior::Uniform,
            PriorKind::Global => Prior::Global(label_prior(dataset.subset(Split::Train), cfg.data.num_classes)),
        };
        Ok(Self {
            dataset,
            scenes,
            registry,
            costs,
            prior,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&Scene> {
        self.dataset.indices(split).into_iter().map(|i| &self.scenes[i]).collect()
    }

    pub fn scene(&self, id: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.id == id)
    }

    pub fn env(&self, cfg: &RunConfig) -> Env<'_> {
        Env {
            costs: &self.costs,
            prior: &self.prior,
            loss_weight: cfg.loss_weight,
        }
    }

    pub fn runner<'a>(&'a self, cfg: &RunConfig, pool: &'a ActionPool) -> Runner<'a> {
        Runner::new(self.env(cfg), pool, &self.registry, cfg.hierarchy.layers, cfg.rollout)
    }

    fn nonempty(&self, split: Split) -> Result<Vec<&Scene>> {
        let scenes = self.split(split);
        if scenes.is_empty() {
            return Err(Error::Validation(format!("{split:?} split is empty")));
        }
        Ok(scenes)
    }

    pub fn propose(&self, cfg: &RunConfig) -> Result<ActionPool> {
        propose_actions(
            &self.nonempty(Split::Train)?,
            &self.split(Split::Val),
            &self.env(cfg),
            &self.registry,
            &cfg.boost,
            &cfg.proposal,
        )
    }

    pub fn static_sequence(&self, cfg: &RunConfig, pool: &ActionPool) -> Result<Vec<usize>> {
        greedy_static_policy(pool, &self.nonempty(Split::Train)?, &self.env(cfg), cfg.rollout.horizon)
    }

    pub fn train(&self, cfg: &RunConfig, pool: &ActionPool) -> Result<LspiOutcome> {
        lspi_train(
            &self.nonempty(Split::Train)?,
            &self.nonempty(Split::Val)?,
            &self.runner(cfg, pool),
            &cfg.lspi,
        )
    }
}

/// The compared methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dnm,
    Sm,
    Rs,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Dnm => "dnm",
            Method::Sm => "sm",
            Method::Rs => "rs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dnm" => Ok(Method::Dnm),
            "sm" => Ok(Method::Sm),
            "rs" => Ok(Method::Rs),
            other => Err(Error::Config(format!("unknown method {other:?}; expected dnm, sm or rs"))),
        }
    }
}

/// Trained artifacts needed to build every method's policy.
pub struct Trained<'a> {
    pub pool: &'a ActionPool,
    pub weights: &'a PolicyWeights,
    pub sequence: &'a [usize],
}

impl Trained<'_> {
    pub fn policy(&self, method: Method, cfg: &RunConfig) -> Policy {
        match method {
            Method::Dnm => Policy::Linear(self.weights.clone()),
            Method::Sm => Policy::Static(self.sequence.to_vec()),
            Method::Rs => random_policy(cfg.eval.random_seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub grid: Vec<f64>,
    pub curves: Vec<MetricCurve>,
    pub aucs: Vec<f64>,
}

/// Curves of `methods` on `scenes` over a shared grid that runs from the
/// initial cost to the largest mean full-trajectory cost among the methods.
pub fn compare(prepared: &Prepared, cfg: &RunConfig, trained: &Trained, methods: &[Method], scenes: &[&Scene]) -> Result<Comparison> {
    if scenes.is_empty() {
        return Err(Error::Validation("no images to evaluate".into()));
    }
    let runner = prepared.runner(cfg, trained.pool);
    let policies: Vec<Policy> = methods.iter().map(|m| trained.policy(*m, cfg)).collect();
    let end = policies
        .iter()
        .map(|p| mean_full_cost(p, scenes, &runner))
        .fold(cfg.costs.initial, f64::max);
    let grid = budget_grid(cfg.costs.initial, end, cfg.eval.budgets);
    let curves: Vec<MetricCurve> = methods
        .iter()
        .zip(&policies)
        .map(|(m, p)| anytime_curve(p, scenes, &runner, &grid, m.tag()))
        .collect();
    let aucs = curves.iter().map(auc).collect::<Result<Vec<_>>>()?;
    Ok(Comparison { grid, curves, aucs })
}
