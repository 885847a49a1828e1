//! Action proposal, policy meta-features and the three policies compared at
//! test time: the static greedy sequence (S-M), uniform random selection over
//! the pool (RS) and the linear Q-function learned by least-squares policy
//! iteration (D-NM).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boost::{fit_learner_sequence, BoostConfig, ResidualSample};
use crate::dataset::ImageSample;
use crate::dhm::{
    initial_state, labeling_loss, normalized_entropy, price, reward_from, splittable, transition, Action,
    BoostLearner, DhmState, Episode, Prior,
};
use crate::error::{Error, Result};
use crate::features::{CostModel, FeatureRegistry, FeatureSet, ImageFeatures};
use crate::segtree::{NodeId, SegTree};

/// One image with everything a rollout needs.
#[derive(Debug, Clone)]
pub struct Scene {
    pub id: String,
    pub tree: SegTree,
    pub features: ImageFeatures,
    pub labels: Vec<u8>,
    /// Global color histogram followed by the image's label frequencies.
    pub descriptor: Vec<f64>,
}

impl Scene {
    pub fn new(sample: &ImageSample, tree: SegTree, features: ImageFeatures) -> Self {
        Self {
            id: sample.id.clone(),
            descriptor: image_descriptor(sample),
            labels: sample.labels.clone(),
            tree,
            features,
        }
    }

    pub fn episode<'a>(&'a self, costs: &'a CostModel) -> Episode<'a> {
        Episode {
            tree: &self.tree,
            features: &self.features,
            costs,
        }
    }
}

/// 8 bins per RGB channel, then the label frequencies of labeled pixels.
pub fn image_descriptor(sample: &ImageSample) -> Vec<f64> {
    let mut hist = vec![0.0; 24];
    for p in &sample.pixels {
        for c in 0..3 {
            hist[c * 8 + (p[c] as usize >> 5)] += 1.0;
        }
    }
    let n = sample.pixels.len() as f64;
    hist.iter_mut().for_each(|v| *v /= n);
    let counts = sample.label_counts();
    let labeled: u64 = counts.iter().sum();
    hist.extend(counts.iter().map(|&c| if labeled > 0 { c as f64 / labeled as f64 } else { 0.0 }));
    hist
}

/// Shared settings of the environment.
#[derive(Debug, Clone, Copy)]
pub struct Env<'a> {
    pub costs: &'a CostModel,
    pub prior: &'a Prior,
    /// Weight of the region-entropy term in the labeling loss.
    pub loss_weight: f64,
}

impl Env<'_> {
    pub fn start(&self, scene: &Scene) -> DhmState {
        initial_state(&scene.tree, self.prior, self.costs)
    }

    pub fn loss(&self, state: &DhmState, scene: &Scene) -> f64 {
        labeling_loss(state, &scene.tree, self.loss_weight)
    }

    /// Next state and immediate reward.
    pub fn step(&self, state: &DhmState, action: &Action, scene: &Scene, learners: &[BoostLearner]) -> (DhmState, f64) {
        let next = transition(state, action, &scene.episode(self.costs), learners);
        let r = reward_from(self.loss(state, scene), self.loss(&next, scene), next.cost - state.cost);
        (next, r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Image cluster the sequence was generated on; `None` for the full set.
    pub cluster: Option<usize>,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub action: Action,
    pub provenance: Provenance,
}

/// The discrete action space. Boost entries index into `learners`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionPool {
    pub entries: Vec<PoolEntry>,
    pub learners: Vec<BoostLearner>,
}

impl ActionPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn actions(&self) -> Vec<Action> {
        self.entries.iter().map(|e| e.action).collect()
    }

    pub fn action(&self, index: usize) -> &Action {
        &self.entries[index].action
    }

    /// Pool built from explicit actions, all attributed to the full set.
    pub fn from_actions(actions: Vec<Action>, learners: Vec<BoostLearner>) -> Result<Self> {
        let pool = Self {
            entries: actions
                .into_iter()
                .enumerate()
                .map(|(step, action)| PoolEntry {
                    action,
                    provenance: Provenance { cluster: None, step },
                })
                .collect(),
            learners,
        };
        pool.validate()?;
        Ok(pool)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Validation("action pool is empty".into()));
        }
        for e in &self.entries {
            if let Action::Boost { learner } = e.action {
                if learner >= self.learners.len() {
                    return Err(Error::Validation(format!("boost entry references missing learner {learner}")));
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("pool serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Where the greedy generator gets its per-step candidates from.
pub enum Candidates<'a> {
    /// A fixed list of actions; boosts index `learners`.
    Fixed { actions: &'a [Action], learners: &'a [BoostLearner] },
    /// Splits over `thetas` plus learners fitted on the current active
    /// regions for every `lambda` and every stage-count prefix.
    Fitted {
        thetas: &'a [f64],
        lambdas: &'a [f64],
        stages: &'a [usize],
        registry: &'a FeatureRegistry,
        boost: &'a BoostConfig,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyStep {
    /// Index of the chosen candidate in that step's candidate list.
    pub candidate: usize,
    pub action: Action,
    pub mean_reward: f64,
}

/// A greedy sequence. Boost actions index `learners`, which for fixed
/// candidates is the caller's table.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedySequence {
    pub steps: Vec<GreedyStep>,
    pub learners: Vec<BoostLearner>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Residual samples from the active leaves of every state.
pub fn residual_samples(states: &[DhmState], scenes: &[&Scene]) -> Vec<ResidualSample> {
    let mut out = Vec::new();
    for (i, (state, scene)) in states.iter().zip(scenes).enumerate() {
        for leaf in state.active() {
            let node = &scene.tree.nodes[leaf.node];
            if node.weight <= 0.0 {
                continue;
            }
            out.push(ResidualSample {
                image: i,
                node: leaf.node,
                weight: node.weight,
                truth: node.label_dist.clone(),
                current: leaf.q.clone(),
                x: scene.features.stacked(leaf.node).to_vec(),
                parent: leaf.parent_q.clone(),
            });
        }
    }
    out
}

/// Runs the greedy pass: at every step all images take the candidate with the
/// largest mean immediate reward (ties to the lowest candidate index). Stops
/// at `horizon`, when the best mean reward is not positive, or when the
/// chosen action's mean reward on `holdout` is not positive.
pub fn greedy_sequence(
    candidates: &Candidates,
    train: &[&Scene],
    holdout: &[&Scene],
    env: &Env,
    horizon: usize,
) -> Result<GreedySequence> {
    if train.is_empty() {
        return Err(Error::Validation("greedy pass needs at least one training image".into()));
    }
    if horizon == 0 {
        return Err(Error::Validation("horizon must be at least 1".into()));
    }
    let mut learners: Vec<BoostLearner> = match candidates {
        Candidates::Fixed { learners, .. } => learners.to_vec(),
        Candidates::Fitted { .. } => Vec::new(),
    };
    let mut states: Vec<DhmState> = train.iter().map(|s| env.start(s)).collect();
    let mut held: Vec<DhmState> = holdout.iter().map(|s| env.start(s)).collect();
    let mut steps = Vec::new();
    for _ in 0..horizon {
        let actions: Vec<Action> = match candidates {
            Candidates::Fixed { actions, .. } => actions.to_vec(),
            Candidates::Fitted {
                thetas,
                lambdas,
                stages,
                registry,
                boost,
            } => {
                let mut acts: Vec<Action> = thetas.iter().map(|&theta| Action::Split { theta }).collect();
                let samples = residual_samples(&states, train);
                let max_stages = stages.iter().copied().max().unwrap_or(0);
                if samples.iter().any(|s| s.weight > 0.0) && max_stages > 0 {
                    let used = states.iter().fold(states[0].used, |acc, s| FeatureSet(acc.0 & s.used.0));
                    for &lambda in lambdas.iter() {
                        let (fitted, _) = fit_learner_sequence(&samples, max_stages, lambda, used, registry, env.costs, boost)?;
                        for &p in stages.iter() {
                            learners.push(BoostLearner {
                                stages: fitted[..p].to_vec(),
                            });
                            acts.push(Action::Boost {
                                learner: learners.len() - 1,
                            });
                        }
                    }
                }
                acts
            }
        };
        let mut best: Option<(usize, f64, Vec<DhmState>)> = None;
        for (ci, a) in actions.iter().enumerate() {
            let mut next = Vec::with_capacity(states.len());
            let mut rewards = Vec::with_capacity(states.len());
            for (s, scene) in states.iter().zip(train) {
                let (n, r) = env.step(s, a, scene, &learners);
                next.push(n);
                rewards.push(r);
            }
            let m = mean(rewards);
            if best.as_ref().map_or(true, |(_, b, _)| m > *b) {
                best = Some((ci, m, next));
            }
        }
        let Some((ci, m, next)) = best else { break };
        if m <= 0.0 {
            break;
        }
        let action = actions[ci];
        if !held.is_empty() {
            let mut rewards = Vec::with_capacity(held.len());
            let mut advanced = Vec::with_capacity(held.len());
            for (s, scene) in held.iter().zip(holdout) {
                let (n, r) = env.step(s, &action, scene, &learners);
                advanced.push(n);
                rewards.push(r);
            }
            if mean(rewards) <= 0.0 {
                break;
            }
            held = advanced;
        }
        states = next;
        steps.push(GreedyStep {
            candidate: ci,
            action,
            mean_reward: m,
        });
    }
    if matches!(candidates, Candidates::Fitted { .. }) {
        let kept = compact_learners(&mut steps, learners);
        return Ok(GreedySequence { steps, learners: kept });
    }
    Ok(GreedySequence { steps, learners })
}

/// Drops learners no step references and renumbers the boost actions.
fn compact_learners(steps: &mut [GreedyStep], learners: Vec<BoostLearner>) -> Vec<BoostLearner> {
    let mut kept = Vec::new();
    let mut slots = learners.into_iter().map(Some).collect::<Vec<_>>();
    for step in steps.iter_mut() {
        if let Action::Boost { learner } = &mut step.action {
            kept.push(slots[*learner].take().expect("each fitted learner is chosen at most once"));
            *learner = kept.len() - 1;
        }
    }
    kept
}

/// Seeded Lloyd iterations; returns a cluster index per point.
pub fn kmeans(points: &[Vec<f64>], k: usize, iterations: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    if n == 0 || k == 0 {
        return vec![0; n];
    }
    let k = k.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = rand::seq::index::sample(&mut rng, n, k)
        .into_vec()
        .into_iter()
        .map(|i| points[i].clone())
        .collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..iterations {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            for c in 1..k {
                if dist(p, &centers[c]) < dist(p, &centers[best]) {
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (d, v) in center.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    assign
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub thetas: Vec<f64>,
    /// Multiplied by the scale returned by [`lambda_scale`].
    pub lambdas: Vec<f64>,
    pub stages: Vec<usize>,
    pub clusters: usize,
    pub kmeans_iterations: usize,
    pub seed: u64,
    pub horizon: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            thetas: vec![0.0, 0.3, 0.6, 1.0],
            lambdas: vec![0.01, 0.1, 1.0],
            stages: vec![5, 10, 20],
            clusters: 3,
            kmeans_iterations: 50,
            seed: 17,
            horizon: 40,
        }
    }
}

/// Converts the unitless lambda grid into error-per-cost units: the labeled
/// mass of one image divided by the cost of extracting every feature type.
pub fn lambda_scale(costs: &CostModel) -> f64 {
    let total = costs.total_feature_cost();
    if total > 0.0 {
        1.0 / total
    } else {
        1.0
    }
}

/// Greedy sequences on the full training set and on each image cluster,
/// merged into one pool. Splits are deduplicated by threshold and boosts by
/// learner content. The full-set sequence comes first.
pub fn propose_actions(
    train: &[&Scene],
    holdout: &[&Scene],
    env: &Env,
    registry: &FeatureRegistry,
    boost: &BoostConfig,
    cfg: &ProposalConfig,
) -> Result<ActionPool> {
    if train.is_empty() {
        return Err(Error::Validation("cannot propose actions without training images".into()));
    }
    if cfg.horizon == 0 {
        return Err(Error::Validation("proposal horizon must be at least 1".into()));
    }
    let scale = lambda_scale(env.costs);
    let lambdas: Vec<f64> = cfg.lambdas.iter().map(|l| l * scale).collect();
    let source = Candidates::Fitted {
        thetas: &cfg.thetas,
        lambdas: &lambdas,
        stages: &cfg.stages,
        registry,
        boost,
    };

    let mut groups: Vec<(Option<usize>, Vec<&Scene>)> = vec![(None, train.to_vec())];
    if cfg.clusters > 1 {
        let points: Vec<Vec<f64>> = train.iter().map(|s| s.descriptor.clone()).collect();
        let assign = kmeans(&points, cfg.clusters, cfg.kmeans_iterations, cfg.seed);
        for c in 0..cfg.clusters {
            let members: Vec<&Scene> = train.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(s, _)| *s).collect();
            if !members.is_empty() {
                groups.push((Some(c), members));
            }
        }
    }

    let mut pool = ActionPool {
        entries: Vec::new(),
        learners: Vec::new(),
    };
    for (cluster, members) in groups {
        let seq = greedy_sequence(&source, &members, holdout, env, cfg.horizon)?;
        for (step, gs) in seq.steps.iter().enumerate() {
            let action = match gs.action {
                Action::Split { theta } => {
                    let dup = pool
                        .entries
                        .iter()
                        .any(|e| matches!(e.action, Action::Split { theta: t } if t == theta));
                    if dup {
                        continue;
                    }
                    Action::Split { theta }
                }
                Action::Boost { learner } => {
                    let l = &seq.learners[learner];
                    if pool.learners.contains(l) {
                        continue;
                    }
                    pool.learners.push(l.clone());
                    Action::Boost {
                        learner: pool.learners.len() - 1,
                    }
                }
            };
            pool.entries.push(PoolEntry {
                action,
                provenance: Provenance { cluster, step },
            });
        }
    }
    if pool.entries.is_empty() {
        for &theta in &cfg.thetas {
            pool.entries.push(PoolEntry {
                action: Action::Split { theta },
                provenance: Provenance { cluster: None, step: 0 },
            });
        }
    }
    pool.validate()?;
    Ok(pool)
}

/// Dimensions of the meta-feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaLayout {
    pub num_features: usize,
    pub num_layers: usize,
    pub pool_size: usize,
    /// Divides action costs.
    pub cost_scale: f64,
}

impl MetaLayout {
    pub fn new(num_features: usize, num_layers: usize, pool: &ActionPool, costs: &CostModel) -> Self {
        let total = costs.total_feature_cost();
        Self {
            num_features,
            num_layers,
            pool_size: pool.len(),
            cost_scale: if total > 0.0 { total } else { 1.0 },
        }
    }

    /// Length of the state block, including its constant entry.
    pub fn state_dim(&self) -> usize {
        12 + self.num_features + 2 * self.num_layers
    }

    /// Length of the action block.
    pub fn action_dim(&self) -> usize {
        self.num_features + 8
    }

    /// Length of the slot owned by one pool action.
    pub fn slot_dim(&self) -> usize {
        self.state_dim() + self.action_dim()
    }

    /// One slot per pool action.
    pub fn dim(&self) -> usize {
        self.pool_size * self.slot_dim()
    }
}

/// Area-weighted summaries of a state, independent of the action.
///
/// Layout: constant 1, mean entropy, mean entropy drop since `prev`, used-feature
/// indicator, histogram of top-two marginal gaps (4 bins), active area,
/// active mean entropy, active mean entropy drop, layer distribution of all
/// leaves, layer distribution of active leaves, spent cost over the cost
/// scale, step count over 10.
pub fn state_features(state: &DhmState, prev: Option<&DhmState>, tree: &SegTree, layout: &MetaLayout) -> Vec<f64> {
    let f = layout.num_features;
    let layers = layout.num_layers;
    let prev_q = |node: NodeId| -> Option<&[f64]> {
        let prev = prev?;
        let mut id = node;
        loop {
            if let Ok(i) = prev.leaves.binary_search_by_key(&id, |l| l.node) {
                return Some(&prev.leaves[i].q);
            }
            id = tree.nodes[id].parent?;
        }
    };
    let mut entropy = 0.0;
    let mut drop = 0.0;
    let mut gaps = [0.0; 4];
    let (mut active_area, mut active_entropy, mut active_drop) = (0.0, 0.0, 0.0);
    let mut all_layers = vec![0.0; layers];
    let mut active_layers = vec![0.0; layers];
    let mut n_active = 0usize;
    for leaf in &state.leaves {
        let area = tree.area_fraction(leaf.node);
        let h = normalized_entropy(&leaf.q);
        let d = prev_q(leaf.node).map_or(0.0, |q| normalized_entropy(q) - h);
        entropy += area * h;
        drop += area * d;
        let mut sorted = leaf.q.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let gap = sorted[0] - sorted.get(1).copied().unwrap_or(0.0);
        gaps[((gap * 4.0) as usize).min(3)] += area;
        let layer = tree.nodes[leaf.node].layer.min(layers - 1);
        all_layers[layer] += 1.0;
        if leaf.active {
            active_area += area;
            active_entropy += area * h;
            active_drop += area * d;
            active_layers[layer] += 1.0;
            n_active += 1;
        }
    }
    if active_area > 0.0 {
        active_entropy /= active_area;
        active_drop /= active_area;
    }
    let mut v = Vec::with_capacity(layout.state_dim());
    v.push(1.0);
    v.push(entropy);
    v.push(drop);
    v.extend((0..f).map(|i| if state.used.contains(i) { 1.0 } else { 0.0 }));
    v.extend(gaps);
    v.push(active_area);
    v.push(active_entropy);
    v.push(active_drop);
    let n = state.leaves.len() as f64;
    v.extend(all_layers.iter().map(|c| c / n));
    v.extend(active_layers.iter().map(|c| if n_active > 0 { c / n_active as f64 } else { 0.0 }));
    v.push(state.cost / layout.cost_scale);
    v.push(state.step as f64 / 10.0);
    v
}

/// `phi(s, a)`: zero except in the slot of the action's pool index, which
/// holds the state block followed by the action block: new-feature
/// indicator, kind one-hot, normalized cost, split threshold, area fraction
/// the split would refine, stage count, whether and how often (capped at 10,
/// scaled to 1) the action already ran since the last split. Actions that
/// cannot change the marginals (a split with nothing to split, a boost with
/// no active leaves) get the zero vector.
pub fn meta_features(
    state_block: &[f64],
    state: &DhmState,
    action_index: usize,
    repeats: usize,
    pool: &ActionPool,
    episode: &Episode,
    layout: &MetaLayout,
) -> Vec<f64> {
    let ds = layout.state_dim();
    let action = pool.action(action_index);
    let mut v = vec![0.0; layout.dim()];
    let inert = match action {
        Action::Split { theta } => splittable(state, *theta, episode.tree).next().is_none(),
        Action::Boost { .. } => !state.leaves.iter().any(|l| l.active),
    };
    if inert {
        return v;
    }
    let slot = action_index * layout.slot_dim();
    v[slot..slot + ds].copy_from_slice(state_block);
    let mut o = slot + ds;
    if let Action::Boost { learner } = action {
        let fresh = pool.learners[*learner].features().difference(state.used);
        for i in fresh.iter().filter(|&i| i < layout.num_features) {
            v[o + i] = 1.0;
        }
    }
    o += layout.num_features;
    v[o + usize::from(!action.is_split())] = 1.0;
    o += 2;
    v[o] = price(state, action, episode, &pool.learners) / layout.cost_scale;
    match action {
        Action::Split { theta } => {
            v[o + 1] = *theta;
            v[o + 2] = splittable(state, *theta, episode.tree).map(|l| episode.tree.area_fraction(l.node)).sum();
        }
        Action::Boost { learner } => {
            v[o + 3] = pool.learners[*learner].stages.len() as f64 / 10.0;
        }
    }
    if repeats > 0 {
        v[o + 4] = 1.0;
        v[o + 5] = repeats.min(10) as f64 / 10.0;
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyWeights {
    pub eta: Vec<f64>,
    pub layout: MetaLayout,
    /// Exploration scale of the last training iteration.
    pub noise: f64,
    pub seed: u64,
    pub pool_hash: String,
}

/// How actions are chosen during a rollout.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    /// A fixed sequence of pool indices, the same for every image.
    Static(Vec<usize>),
    /// Uniform choice over the pool, seeded per image.
    Random { seed: u64 },
    /// Argmax of the linear Q-function.
    Linear(PolicyWeights),
    /// Training-only oracle: largest immediate reward under the image's
    /// ground truth.
    Myopic,
}

/// Uniform score perturbation used while collecting training rollouts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exploration {
    pub scale: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub horizon: usize,
    /// Stop when the linear policy's best predicted Q is not positive.
    pub early_stop: bool,
    /// Stop after the first executed action with non-positive reward (uses
    /// ground truth; training rollouts only).
    pub stop_on_nonpositive_reward: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            horizon: 40,
            early_stop: false,
            stop_on_nonpositive_reward: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Pool index of every executed action.
    pub actions: Vec<usize>,
    /// `states[0]` is the initial state; `states[t + 1]` follows `actions[t]`.
    pub states: Vec<DhmState>,
    pub rewards: Vec<f64>,
    /// Meta-features of every executed (state, action) pair, when recorded.
    pub features: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &DhmState {
        self.states.last().expect("trajectory has an initial state")
    }

    /// Last state whose cumulative cost fits within `budget`.
    pub fn at_budget(&self, budget: f64) -> &DhmState {
        let n = self.states.iter().take_while(|s| s.cost <= budget).count();
        &self.states[n.saturating_sub(1)]
    }

    /// Number of actions executed within `budget`.
    pub fn steps_within(&self, budget: f64) -> usize {
        self.states.iter().skip(1).take_while(|s| s.cost <= budget).count()
    }
}

fn image_seed(seed: u64, id: &str) -> u64 {
    let h = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(id.as_bytes()).finalize();
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.map_or(true, |b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Everything shared by the rollouts of one pool.
#[derive(Debug, Clone, Copy)]
pub struct Runner<'a> {
    pub env: Env<'a>,
    pub pool: &'a ActionPool,
    pub layout: MetaLayout,
    pub cfg: RolloutConfig,
}

impl<'a> Runner<'a> {
    pub fn new(env: Env<'a>, pool: &'a ActionPool, registry: &FeatureRegistry, num_layers: usize, cfg: RolloutConfig) -> Self {
        Self {
            layout: MetaLayout::new(registry.len(), num_layers, pool, env.costs),
            env,
            pool,
            cfg,
        }
    }

    /// Meta-features of every pool action in `state`; `repeats[i]` counts
    /// runs of action `i` since the last split.
    pub fn all_features(&self, state: &DhmState, prev: Option<&DhmState>, repeats: &[usize], scene: &Scene) -> Vec<Vec<f64>> {
        let episode = scene.episode(self.env.costs);
        let block = state_features(state, prev, &scene.tree, &self.layout);
        (0..self.pool.len())
            .map(|i| meta_features(&block, state, i, repeats[i], self.pool, &episode, &self.layout))
            .collect()
    }

    /// Runs `policy` from the initial state. An action is executed only if
    /// the cumulative cost after it stays within `budget`; otherwise the
    /// rollout stops. The choice never depends on the budget, so a budgeted
    /// rollout is a prefix of the unlimited one.
    pub fn rollout(&self, policy: &Policy, scene: &Scene, budget: f64, explore: Option<Exploration>, record: bool) -> Trajectory {
        let pool = self.pool;
        let env = &self.env;
        let mut rng = ChaCha8Rng::seed_from_u64(match (policy, explore) {
            (Policy::Random { seed }, _) => image_seed(*seed, &scene.id),
            (_, Some(e)) => image_seed(e.seed, &scene.id),
            _ => 0,
        });
        let mut traj = Trajectory {
            actions: Vec::new(),
            states: vec![env.start(scene)],
            rewards: Vec::new(),
            features: Vec::new(),
        };
        let mut repeats = vec![0usize; pool.len()];
        for t in 0..self.cfg.horizon {
            let state = &traj.states[t];
            let prev = t.checked_sub(1).map(|p| &traj.states[p]);
            let need_phi = record || matches!(policy, Policy::Linear(_));
            let mut phis = if need_phi { self.all_features(state, prev, &repeats, scene) } else { Vec::new() };
            let mut outcome: Option<(DhmState, f64)> = None;
            let choice = match policy {
                Policy::Static(seq) => match seq.get(t) {
                    Some(&i) => i,
                    None => break,
                },
                Policy::Random { .. } => rng.gen_range(0..pool.len()),
                Policy::Linear(w) => {
                    let mut scores: Vec<f64> = phis.iter().map(|phi| dot(&w.eta, phi)).collect();
                    if let Some(e) = explore {
                        for s in scores.iter_mut() {
                            *s += rng.gen_range(-1.0..=1.0) * e.scale;
                        }
                    }
                    let best = argmax(&scores).expect("pool is nonempty");
                    if self.cfg.early_stop && scores[best] <= 0.0 {
                        break;
                    }
                    best
                }
                Policy::Myopic => {
                    let mut outcomes: Vec<(DhmState, f64)> = (0..pool.len())
                        .map(|i| env.step(state, pool.action(i), scene, &pool.learners))
                        .collect();
                    let rewards: Vec<f64> = outcomes.iter().map(|o| o.1).collect();
                    let best = argmax(&rewards).expect("pool is nonempty");
                    outcome = Some(outcomes.swap_remove(best));
                    best
                }
            };
            let (next, r) = match outcome {
                Some(o) => o,
                None => env.step(state, pool.action(choice), scene, &pool.learners),
            };
            if next.cost > budget {
                break;
            }
            if record {
                traj.features.push(phis.swap_remove(choice));
            }
            if pool.action(choice).is_split() {
                repeats.iter_mut().for_each(|r| *r = 0);
            }
            repeats[choice] += 1;
            traj.actions.push(choice);
            traj.states.push(next);
            traj.rewards.push(r);
            if self.cfg.stop_on_nonpositive_reward && r <= 0.0 {
                break;
            }
        }
        traj
    }
}

/// S-M: the greedy pass over the pool on the training images, as a fixed
/// sequence of pool indices.
pub fn greedy_static_policy(pool: &ActionPool, train: &[&Scene], env: &Env, horizon: usize) -> Result<Vec<usize>> {
    let actions = pool.actions();
    let seq = greedy_sequence(
        &Candidates::Fixed {
            actions: &actions,
            learners: &pool.learners,
        },
        train,
        &[],
        env,
        horizon,
    )?;
    Ok(seq.steps.iter().map(|s| s.candidate).collect())
}

pub fn random_policy(seed: u64) -> Policy {
    Policy::Random { seed }
}

/// One regression target of the Q-function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QSample {
    pub phi: Vec<f64>,
    pub q: f64,
    pub image: String,
    pub step: usize,
}

/// Backward recursion `Q_t = R_t + gamma * max(Q_{t+1}, 0)` with
/// `Q_T = R_T` at the last step.
pub fn clipped_targets(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut q = vec![0.0; rewards.len()];
    let mut next: Option<f64> = None;
    for t in (0..rewards.len()).rev() {
        q[t] = match next {
            Some(n) => rewards[t] + gamma * n.max(0.0),
            None => rewards[t],
        };
        next = Some(q[t]);
    }
    q
}

/// Rolls `behavior` out on every image (stopping at the first non-positive
/// reward) and turns each step into a Q sample.
pub fn policy_evaluate(
    behavior: &Policy,
    scenes: &[&Scene],
    runner: &Runner,
    gamma: f64,
    explore: Option<Exploration>,
) -> Result<Vec<QSample>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Validation(format!("discount {gamma} outside [0, 1]")));
    }
    let mut training = *runner;
    training.cfg.stop_on_nonpositive_reward = true;
    training.cfg.early_stop = false;
    let mut out = Vec::new();
    for scene in scenes {
        let traj = training.rollout(behavior, scene, f64::INFINITY, explore, true);
        let q = clipped_targets(&traj.rewards, gamma);
        for (step, (phi, q)) in traj.features.into_iter().zip(q).enumerate() {
            out.push(QSample {
                phi,
                q,
                image: scene.id.clone(),
                step,
            });
        }
    }
    Ok(out)
}

/// Ridge regression `(Phi^T Phi / N + beta I) eta = Phi^T Q / N`.
pub fn policy_improve(samples: &[QSample], beta: f64) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Validation("ridge regression needs at least one sample".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::Validation("ridge penalty must be positive".into()));
    }
    let d = samples[0].phi.len();
    let n = samples.len() as f64;
    let mut a = DMatrix::<f64>::zeros(d, d);
    let mut b = DVector::<f64>::zeros(d);
    for s in samples {
        if s.phi.len() != d {
            return Err(Error::Validation("meta-feature dimensions differ across samples".into()));
        }
        let nz: Vec<(usize, f64)> = s.phi.iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect();
        for &(i, vi) in &nz {
            b[i] += vi * s.q / n;
            for &(j, vj) in &nz {
                a[(i, j)] += vi * vj / n;
            }
        }
    }
    for i in 0..d {
        a[(i, i)] += beta;
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Degenerate("ridge system is not positive definite".into()))?;
    Ok(chol.solve(&b).iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LspiConfig {
    pub gamma: f64,
    pub beta: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Initial exploration half-width relative to the mean absolute Q target.
    pub noise: f64,
    pub seed: u64,
    /// Points of the validation budget grid.
    pub budgets: usize,
}

impl Default for LspiConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            beta: 1e-2,
            max_iters: 6,
            tol: 1e-3,
            noise: 0.1,
            seed: 23,
            budgets: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LspiIteration {
    pub iteration: usize,
    pub samples: usize,
    pub noise: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LspiOutcome {
    pub weights: PolicyWeights,
    pub history: Vec<LspiIteration>,
    /// Validation AUC of the returned weights.
    pub val_auc: f64,
}

/// Policy iteration starting from the static greedy sequence. Every iteration collects
/// on-policy samples with decaying exploration, refits the Q-function and
/// scores it on the validation images without noise; the best-scoring
/// weights are returned.
pub fn lspi_train(train: &[&Scene], val: &[&Scene], runner: &Runner, cfg: &LspiConfig) -> Result<LspiOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Validation("policy training needs training and validation images".into()));
    }
    let pool_hash = runner.pool.content_hash();
    let init = Policy::Static(greedy_static_policy(runner.pool, train, &runner.env, runner.cfg.horizon)?);
    let reference = crate::eval::mean_full_cost(&Policy::Myopic, val, runner).max(crate::eval::mean_full_cost(&init, val, runner));
    let grid = crate::eval::budget_grid(runner.env.costs.initial_cost, reference, cfg.budgets);
    let score = |w: &PolicyWeights| -> Result<f64> {
        let curve = crate::eval::anytime_curve(&Policy::Linear(w.clone()), val, runner, &grid, "dnm");
        crate::eval::auc(&curve)
    };
    let weights = |eta: Vec<f64>, noise: f64| PolicyWeights {
        eta,
        layout: runner.layout,
        noise,
        seed: cfg.seed,
        pool_hash: pool_hash.clone(),
    };

    let samples = policy_evaluate(&init, train, runner, cfg.gamma, None)?;
    let mean_abs_q = samples.iter().map(|s| s.q.abs()).sum::<f64>() / samples.len().max(1) as f64;
    let mut current = weights(policy_improve(&samples, cfg.beta)?, 0.0);
    let mut current_auc = score(&current)?;
    let mut history = vec![LspiIteration {
        iteration: 0,
        samples: samples.len(),
        noise: 0.0,
        val_auc: current_auc,
    }];
    let mut best = (current.clone(), current_auc);
    let mut noise = cfg.noise * mean_abs_q;
    for iteration in 1..=cfg.max_iters {
        let explore = Exploration {
            scale: noise,
            seed: cfg.seed.wrapping_add(iteration as u64),
        };
        let samples = policy_evaluate(&Policy::Linear(current.clone()), train, runner, cfg.gamma, Some(explore))?;
        if samples.is_empty() {
            break;
        }
        let next = weights(policy_improve(&samples, cfg.beta)?, noise);
        let next_auc = score(&next)?;
        history.push(LspiIteration {
            iteration,
            samples: samples.len(),
            noise,
            val_auc: next_auc,
        });
        if next_auc > best.1 {
            best = (next.clone(), next_auc);
        }
        let delta = (next_auc - current_auc).abs();
        current = next;
        current_auc = next_auc;
        noise *= 0.5;
        if delta < cfg.tol {
            break;
        }
    }
    Ok(LspiOutcome {
        weights: best.0,
        history,
        val_auc: best.1,
    })
}
