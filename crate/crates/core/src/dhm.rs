//! The dynamic hierarchical model as an MDP environment: state, the
//! split-inherit and local belief update operators, labeling loss, reward,
//! value, and per-pixel prediction.

use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boost::{LearnerInput, WeakLearner};
use crate::features::{action_cost, CostModel, CostQuery, FeatureSet, ImageFeatures};
use crate::segtree::{NodeId, SegTree};

/// Clamp inside the loss logarithm.
pub const LOSS_LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prior {
    Uniform,
    Global(Vec<f64>),
}

impl Prior {
    pub fn marginal(&self, k: usize) -> Vec<f64> {
        match self {
            Prior::Uniform => vec![1.0 / k as f64; k],
            Prior::Global(p) => p.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    pub node: NodeId,
    pub q: Vec<f64>,
    /// Marginal the parent held when this leaf was created; `None` for the root.
    pub parent_q: Option<Vec<f64>>,
    pub active: bool,
}

impl Leaf {
    pub fn parent_marginal(&self) -> &[f64] {
        self.parent_q.as_deref().unwrap_or(&self.q)
    }
}

/// `s_t`: a tree cut with per-leaf marginals and the active set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DhmState {
    /// Sorted by node id.
    pub leaves: Vec<Leaf>,
    pub step: usize,
    pub cost: f64,
    pub used: FeatureSet,
}

impl DhmState {
    pub fn active(&self) -> impl Iterator<Item = &Leaf> {
        self.leaves.iter().filter(|l| l.active)
    }

    pub fn active_count(&self) -> usize {
        self.leaves.iter().filter(|l| l.active).count()
    }

    /// Short content hash for logs.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.leaves {
            h.update((l.node as u64).to_le_bytes());
            h.update([l.active as u8]);
            for v in &l.q {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.update((self.step as u64).to_le_bytes());
        h.update(self.cost.to_bits().to_le_bytes());
        h.update(self.used.0.to_le_bytes());
        hex::encode(&h.finalize()[..8])
    }
}

/// Either a split at entropy threshold `theta` or a boost with the learner at
/// the given index of the caller's learner table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Action {
    Split { theta: f64 },
    Boost { learner: usize },
}

impl Action {
    pub fn is_split(&self) -> bool {
        matches!(self, Action::Split { .. })
    }
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Action::Split { theta } => write!(f, "split({theta})"),
            Action::Boost { learner } => write!(f, "boost({learner})"),
        }
    }
}

/// A boost action: one or more weak learners applied in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostLearner {
    pub stages: Vec<WeakLearner>,
}

impl BoostLearner {
    pub fn features(&self) -> FeatureSet {
        self.stages.iter().fold(FeatureSet::empty(), |acc, s| acc.union(s.features))
    }
}

/// Read-only per-image context shared by all transitions.
#[derive(Debug, Clone, Copy)]
pub struct Episode<'a> {
    pub tree: &'a SegTree,
    pub features: &'a ImageFeatures,
    pub costs: &'a CostModel,
}

/// Entropy normalized by `ln K`, so it lies in `[0, 1]`.
pub fn normalized_entropy(q: &[f64]) -> f64 {
    if q.len() < 2 {
        return 0.0;
    }
    let h: f64 = q.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    h / (q.len() as f64).ln()
}

pub fn initial_state(tree: &SegTree, prior: &Prior, costs: &CostModel) -> DhmState {
    DhmState {
        leaves: vec![Leaf {
            node: tree.root(),
            q: prior.marginal(tree.num_classes),
            parent_q: None,
            active: true,
        }],
        step: 0,
        cost: costs.initial_cost,
        used: FeatureSet::empty(),
    }
}

/// Leaves that a split at `theta` would replace.
pub fn splittable<'a>(state: &'a DhmState, theta: f64, tree: &'a SegTree) -> impl Iterator<Item = &'a Leaf> + 'a {
    state
        .leaves
        .iter()
        .filter(move |l| !tree.nodes[l.node].children.is_empty() && normalized_entropy(&l.q) > theta)
}

/// Number of regions a split at `theta` would create.
pub fn split_region_count(state: &DhmState, theta: f64, tree: &SegTree) -> usize {
    splittable(state, theta, tree).map(|l| tree.nodes[l.node].children.len()).sum()
}

/// Split-inherit: leaves with normalized entropy strictly above `theta` are
/// replaced by their children, which copy the parent marginal and become the
/// new active set.
pub fn apply_split(state: &DhmState, theta: f64, tree: &SegTree, costs: &CostModel) -> DhmState {
    let mut leaves = Vec::with_capacity(state.leaves.len());
    let mut created = 0;
    for l in &state.leaves {
        let node = &tree.nodes[l.node];
        if !node.children.is_empty() && normalized_entropy(&l.q) > theta {
            for &c in &node.children {
                leaves.push(Leaf {
                    node: c,
                    q: l.q.clone(),
                    parent_q: Some(l.q.clone()),
                    active: true,
                });
                created += 1;
            }
        } else {
            leaves.push(Leaf {
                active: false,
                ..l.clone()
            });
        }
    }
    leaves.sort_by_key(|l| l.node);
    DhmState {
        leaves,
        step: state.step + 1,
        cost: state.cost + action_cost(CostQuery::Split { new_regions: created }, costs, state.used),
        used: state.used,
    }
}

/// Local belief update with a sequence of weak learners, applied to the
/// active leaves only. An empty active set is a paid no-op.
pub fn apply_boost_stages(state: &DhmState, stages: &[WeakLearner], episode: &Episode) -> DhmState {
    let mut next = state.clone();
    for stage in stages {
        for leaf in next.leaves.iter_mut().filter(|l| l.active) {
            let input = LearnerInput {
                x: episode.features.stacked(leaf.node),
                parent: leaf.parent_marginal(),
            };
            let q = stage.update(&leaf.q, &input);
            leaf.q = q;
        }
    }
    let features = stages.iter().fold(FeatureSet::empty(), |acc, s| acc.union(s.features));
    next.cost += action_cost(
        CostQuery::Boost {
            stages: stages.len(),
            features,
        },
        episode.costs,
        state.used,
    );
    next.used = state.used.union(features);
    next.step += 1;
    next
}

pub fn apply_boost(state: &DhmState, learner: &WeakLearner, episode: &Episode) -> DhmState {
    apply_boost_stages(state, std::slice::from_ref(learner), episode)
}

/// Deterministic transition; boost actions index into `learners`.
pub fn transition(state: &DhmState, action: &Action, episode: &Episode, learners: &[BoostLearner]) -> DhmState {
    match *action {
        Action::Split { theta } => apply_split(state, theta, episode.tree, episode.costs),
        Action::Boost { learner } => apply_boost_stages(state, &learners[learner].stages, episode),
    }
}

/// Price of `action` in `state` without executing it.
pub fn price(state: &DhmState, action: &Action, episode: &Episode, learners: &[BoostLearner]) -> f64 {
    match *action {
        Action::Split { theta } => action_cost(
            CostQuery::Split {
                new_regions: split_region_count(state, theta, episode.tree),
            },
            episode.costs,
            state.used,
        ),
        Action::Boost { learner } => action_cost(
            CostQuery::Boost {
                stages: learners[learner].stages.len(),
                features: learners[learner].features(),
            },
            episode.costs,
            state.used,
        ),
    }
}

/// Cross-entropy of the marginals against the region label distributions
/// plus `partition_weight` times the label-mixing entropy of the regions.
pub fn labeling_loss(state: &DhmState, tree: &SegTree, partition_weight: f64) -> f64 {
    let (ce, mix) = loss_terms(state, tree);
    ce + partition_weight * mix
}

/// `(cross-entropy, region entropy)` summed over leaves with positive weight.
pub fn loss_terms(state: &DhmState, tree: &SegTree) -> (f64, f64) {
    let mut ce = 0.0;
    let mut mix = 0.0;
    for l in &state.leaves {
        let node = &tree.nodes[l.node];
        if node.weight <= 0.0 {
            continue;
        }
        for (&p, &q) in node.label_dist.iter().zip(&l.q) {
            if p > 0.0 {
                ce -= node.weight * p * q.max(LOSS_LOG_FLOOR).ln();
                mix -= node.weight * p * p.ln();
            }
        }
    }
    (ce, mix)
}

/// Loss improvement per unit cost; zero for free actions.
pub fn reward_from(loss_before: f64, loss_after: f64, cost: f64) -> f64 {
    if cost > 0.0 {
        (loss_before - loss_after) / cost
    } else {
        0.0
    }
}

pub fn reward(before: &DhmState, after: &DhmState, tree: &SegTree, partition_weight: f64) -> f64 {
    reward_from(
        labeling_loss(before, tree, partition_weight),
        labeling_loss(after, tree, partition_weight),
        after.cost - before.cost,
    )
}

/// Discounted sum `sum_t gamma^t r_t`.
pub fn trajectory_value(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

/// Per-pixel argmax of the covering leaf's marginal; ties go to the lowest class.
pub fn predict_labels(state: &DhmState, tree: &SegTree) -> Vec<u8> {
    let mut label_of: Vec<Option<u8>> = vec![None; tree.nodes.len()];
    for l in &state.leaves {
        let mut best = 0;
        for (k, &v) in l.q.iter().enumerate() {
            if v > l.q[best] {
                best = k;
            }
        }
        label_of[l.node] = Some(best as u8);
    }
    (0..tree.width * tree.height)
        .map(|p| {
            tree.assignment
                .iter()
                .find_map(|assign| label_of[assign[p] as usize])
                .expect("leaves form a tree cut")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub step: usize,
    pub before: String,
    pub action: Action,
    pub after: String,
    pub loss_before: f64,
    pub loss_after: f64,
    pub cost: f64,
    pub reward: f64,
}

impl TransitionRecord {
    pub fn new(before: &DhmState, action: Action, after: &DhmState, tree: &SegTree, partition_weight: f64) -> Self {
        let loss_before = labeling_loss(before, tree, partition_weight);
        let loss_after = labeling_loss(after, tree, partition_weight);
        let cost = after.cost - before.cost;
        Self {
            step: before.step,
            before: before.digest(),
            action,
            after: after.digest(),
            loss_before,
            loss_after,
            cost,
            reward: reward_from(loss_before, loss_after, cost),
        }
    }
}

/// Writes `step,action,cost,loss,reward` rows.
pub fn write_trajectory_csv<W: Write>(out: W, records: &[TransitionRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "action", "cost", "loss", "reward"])?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.action.to_string(),
            r.cost.to_string(),
            r.loss_after.to_string(),
            r.reward.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
