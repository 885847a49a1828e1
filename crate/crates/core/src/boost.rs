//! Cost-regularized multi-class weak learners fitted on weighted residuals of
//! the active regions, in the style of Greedy Miser.
//!
//! A learner holds one shallow regression tree per class over the stacked
//! input `f = [x, q_parent]`, where `x` concatenates every registered feature
//! type and `q_parent` is the parent region's marginal. Candidate learners are
//! restricted to at most `max_types` feature types (the parent block is always
//! free) and the one minimizing squared error plus `lambda * cost` wins.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{CostModel, FeatureRegistry, FeatureSet};
use crate::segtree::NodeId;

/// Floor applied to marginal entries after a multiplicative update.
pub const MARGINAL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostConfig {
    /// Maximum regression-tree depth.
    pub depth: usize,
    /// Line-search grid for the learner coefficient; should contain 0.
    pub alpha_grid: Vec<f64>,
    /// Maximum number of feature types one learner may read.
    pub max_types: usize,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            alpha_grid: vec![0.0, 0.125, 0.25, 0.5, 1.0],
            max_types: 2,
        }
    }
}

/// Stacked learner input: region features followed by the parent marginal.
#[derive(Debug, Clone, Copy)]
pub struct LearnerInput<'a> {
    pub x: &'a [f64],
    pub parent: &'a [f64],
}

impl LearnerInput<'_> {
    #[inline]
    pub fn get(&self, col: usize) -> f64 {
        if col < self.x.len() {
            self.x[col]
        } else {
            self.parent[col - self.x.len()]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf { value: f64 },
    Split { column: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn predict(&self, input: &LearnerInput) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split { column, threshold, left, right } => {
                    i = if input.get(*column) <= *threshold { *left } else { *right };
                }
            }
        }
    }

    fn columns(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            TreeNode::Split { column, .. } => Some(*column),
            TreeNode::Leaf { .. } => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLearner {
    /// One hypothesis per class.
    pub hypotheses: Vec<RegressionTree>,
    pub alpha: f64,
    /// Feature types read by any hypothesis.
    pub features: FeatureSet,
    pub apply_cost: f64,
    pub lambda: f64,
}

impl WeakLearner {
    pub fn responses(&self, input: &LearnerInput) -> Vec<f64> {
        self.hypotheses.iter().map(|h| h.predict(input)).collect()
    }

    /// Applies the multiplicative update to `q`.
    pub fn update(&self, q: &[f64], input: &LearnerInput) -> Vec<f64> {
        multiplicative_update(q, &self.responses(input), self.alpha)
    }
}

/// `q'(k) ∝ q(k) exp(alpha * h_k)`, floored at [`MARGINAL_FLOOR`] before the
/// final renormalization.
pub fn multiplicative_update(q: &[f64], responses: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(q.len());
    update_into(q, responses, alpha, &mut out);
    out
}

fn update_into(q: &[f64], responses: &[f64], alpha: f64, out: &mut Vec<f64>) {
    out.clear();
    if alpha == 0.0 {
        out.extend_from_slice(q);
        return;
    }
    out.extend(q.iter().zip(responses).map(|(&p, &h)| p.max(MARGINAL_FLOOR).ln() + alpha * h));
    normalize_logs(out);
}

/// Same result as [`update_into`] from precomputed `ln max(q, floor)`.
fn update_from_logs(logs: &[f64], responses: &[f64], alpha: f64, out: &mut Vec<f64>) {
    out.clear();
    out.extend(logs.iter().zip(responses).map(|(&l, &h)| l + alpha * h));
    normalize_logs(out);
}

fn normalize_logs(out: &mut [f64]) {
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.iter_mut().for_each(|l| *l = (*l - max).exp());
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v = (*v / sum).max(MARGINAL_FLOOR));
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSample {
    pub image: usize,
    pub node: NodeId,
    pub weight: f64,
    /// Ground-truth label distribution `p_i`.
    pub truth: Vec<f64>,
    /// Current marginal `q_i`.
    pub current: Vec<f64>,
    /// Stacked region features.
    pub x: Vec<f64>,
    /// Parent marginal; `None` means the region uses its own marginal.
    pub parent: Option<Vec<f64>>,
}

impl ResidualSample {
    pub fn target(&self) -> Vec<f64> {
        self.truth.iter().zip(&self.current).map(|(p, q)| p - q).collect()
    }

    pub fn input(&self) -> LearnerInput<'_> {
        LearnerInput {
            x: &self.x,
            parent: self.parent.as_deref().unwrap_or(&self.current),
        }
    }

    pub fn squared_error(&self) -> f64 {
        self.weight
            * self
                .truth
                .iter()
                .zip(&self.current)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
    }
}

/// Weighted squared distance between truth and current marginals.
pub fn weighted_error(samples: &[ResidualSample]) -> f64 {
    samples.iter().map(|s| s.squared_error()).sum()
}

#[derive(Clone, Copy)]
struct ColumnSplit {
    gain: f64,
    threshold: f64,
}

struct NodeStats {
    members: Vec<bool>,
    weight: f64,
    sum: f64,
    /// Best split per column, filled on first request.
    best: Vec<Option<Option<ColumnSplit>>>,
}

type PathKey = (usize, Vec<(usize, bool)>);

/// Shared per-call state: column-major inputs, presorted columns and a memo
/// of node statistics keyed by class and the path of column choices.
struct SplitSearch {
    weights: Vec<f64>,
    targets: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    sorted: Vec<Vec<u32>>,
    memo: HashMap<PathKey, NodeStats>,
}

impl SplitSearch {
    fn new(rows: &[&ResidualSample], n_cols: usize) -> Self {
        let values: Vec<Vec<f64>> = (0..n_cols)
            .map(|c| rows.iter().map(|r| r.input().get(c)).collect())
            .collect();
        let sorted = values
            .iter()
            .map(|col| {
                let mut idx: Vec<u32> = (0..rows.len() as u32).collect();
                idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Self {
            weights: rows.iter().map(|r| r.weight).collect(),
            targets: rows.iter().map(|r| r.target()).collect(),
            values,
            sorted,
            memo: HashMap::new(),
        }
    }

    fn node(&mut self, class: usize, path: &[(usize, bool)]) -> PathKey {
        let key = (class, path.to_vec());
        if !self.memo.contains_key(&key) {
            let members = match path.split_last() {
                None => vec![true; self.weights.len()],
                Some((&(col, left), parent_path)) => {
                    let pk = self.node(class, parent_path);
                    let threshold = self.best(&pk, col).expect("path follows a valid split").threshold;
                    let values = &self.values[col];
                    self.memo[&pk]
                        .members
                        .iter()
                        .enumerate()
                        .map(|(i, &m)| m && ((values[i] <= threshold) == left))
                        .collect()
                }
            };
            let (mut weight, mut sum) = (0.0, 0.0);
            for (i, &m) in members.iter().enumerate() {
                if m {
                    weight += self.weights[i];
                    sum += self.weights[i] * self.targets[i][class];
                }
            }
            let n_cols = self.values.len();
            self.memo.insert(
                key.clone(),
                NodeStats {
                    members,
                    weight,
                    sum,
                    best: vec![None; n_cols],
                },
            );
        }
        key
    }

    fn best(&mut self, key: &PathKey, col: usize) -> Option<ColumnSplit> {
        if let Some(b) = self.memo[key].best[col] {
            return b;
        }
        let b = self.scan(key.0, &self.memo[key], col);
        self.memo.get_mut(key).expect("node exists").best[col] = Some(b);
        b
    }

    /// Largest weighted variance reduction over thresholds of one column.
    fn scan(&self, class: usize, node: &NodeStats, col: usize) -> Option<ColumnSplit> {
        let (weight, sum) = (node.weight, node.sum);
        let base = if weight > 0.0 { sum * sum / weight } else { 0.0 };
        let values = &self.values[col];
        let mut best: Option<ColumnSplit> = None;
        let (mut wl, mut sl) = (0.0, 0.0);
        let mut prev: Option<f64> = None;
        for &i in &self.sorted[col] {
            let i = i as usize;
            if !node.members[i] {
                continue;
            }
            let v = values[i];
            if let Some(pv) = prev {
                let wr = weight - wl;
                if v > pv && wl > 0.0 && wr > 1e-300 {
                    let sr = sum - sl;
                    let gain = sl * sl / wl + sr * sr / wr - base;
                    if gain > 1e-15 && best.map_or(true, |b| gain > b.gain) {
                        best = Some(ColumnSplit {
                            gain,
                            threshold: 0.5 * (pv + v),
                        });
                    }
                }
            }
            wl += self.weights[i];
            sl += self.weights[i] * self.targets[i][class];
            prev = Some(v);
        }
        best
    }

    fn grow(&mut self, class: usize, path: &mut Vec<(usize, bool)>, depth: usize, allowed: &[usize], nodes: &mut Vec<TreeNode>) -> usize {
        let key = self.node(class, path);
        let stats = &self.memo[&key];
        let leaf_value = if stats.weight > 0.0 { stats.sum / stats.weight } else { 0.0 };
        let mut choice: Option<(usize, ColumnSplit)> = None;
        if depth > 0 {
            for &c in allowed {
                if let Some(s) = self.best(&key, c) {
                    if choice.map_or(true, |(_, b)| s.gain > b.gain) {
                        choice = Some((c, s));
                    }
                }
            }
        }
        let id = nodes.len();
        nodes.push(TreeNode::Leaf { value: leaf_value });
        if let Some((column, split)) = choice {
            path.push((column, true));
            let left = self.grow(class, path, depth - 1, allowed, nodes);
            path.pop();
            path.push((column, false));
            let right = self.grow(class, path, depth - 1, allowed, nodes);
            path.pop();
            nodes[id] = TreeNode::Split {
                column,
                threshold: split.threshold,
                left,
                right,
            };
        }
        id
    }
}

fn candidate_sets(n_types: usize, max_types: usize) -> Vec<FeatureSet> {
    let mut out = vec![FeatureSet::empty()];
    if max_types >= 1 {
        out.extend((0..n_types).map(|i| [i].into_iter().collect::<FeatureSet>()));
    }
    if max_types >= 2 {
        for i in 0..n_types {
            for j in i + 1..n_types {
                out.push([i, j].into_iter().collect());
            }
        }
    }
    out
}

/// Post-update weighted squared error for each coefficient on the grid.
fn error_after(rows: &[&ResidualSample], logs: &[Vec<f64>], responses: &[Vec<f64>], alpha: f64) -> f64 {
    let mut q = Vec::new();
    rows.iter()
        .zip(logs)
        .zip(responses)
        .map(|((s, l), h)| {
            if alpha == 0.0 {
                q.clear();
                q.extend_from_slice(&s.current);
            } else {
                update_from_logs(l, h, alpha, &mut q);
            }
            s.weight * s.truth.iter().zip(&q).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()
        })
        .sum()
}

/// Fits one learner by exact argmin over the finite candidate pool of
/// feature-type subsets. Ties go to the cheaper candidate, then to the
/// lexicographically smallest type set.
///
/// Trees are fitted to the additive residual `p - q`; the coefficient is
/// line-searched on the error measured after the multiplicative update, so a
/// grid containing 0 never increases the training error.
pub fn fit_weak_learner(
    samples: &[ResidualSample],
    lambda: f64,
    used: FeatureSet,
    registry: &FeatureRegistry,
    costs: &CostModel,
    cfg: &BoostConfig,
) -> Result<WeakLearner> {
    if lambda < 0.0 {
        return Err(Error::Validation("lambda must be nonnegative".into()));
    }
    let rows: Vec<&ResidualSample> = samples.iter().filter(|s| s.weight > 0.0).collect();
    if rows.is_empty() {
        return Err(Error::Degenerate("no residual sample has positive weight".into()));
    }
    let k = rows[0].truth.len();
    let dx = registry.total_dim();
    let n_cols = dx + k;
    let offsets = registry.offsets();
    let mut search = SplitSearch::new(&rows, n_cols);
    let logs: Vec<Vec<f64>> = rows
        .iter()
        .map(|s| s.current.iter().map(|&p| p.max(MARGINAL_FLOOR).ln()).collect())
        .collect();
    let mut grid = cfg.alpha_grid.clone();
    grid.sort_by(f64::total_cmp);
    let mut seen: Vec<(Vec<RegressionTree>, f64, f64)> = Vec::new();

    struct Scored {
        learner: WeakLearner,
        objective: f64,
        incremental: f64,
        types: Vec<usize>,
    }
    let mut best: Option<Scored> = None;
    for candidate in candidate_sets(registry.len(), cfg.max_types) {
        let mut allowed: Vec<usize> = candidate
            .iter()
            .flat_map(|t| offsets[t]..offsets[t] + registry.types[t].dim())
            .collect();
        allowed.extend(dx..n_cols);

        let hypotheses: Vec<RegressionTree> = (0..k)
            .map(|class| {
                let mut nodes = Vec::new();
                search.grow(class, &mut Vec::new(), cfg.depth, &allowed, &mut nodes);
                RegressionTree { nodes }
            })
            .collect();
        let features: FeatureSet = hypotheses
            .iter()
            .flat_map(|h| h.columns())
            .filter_map(|c| registry.type_of_column(c))
            .collect();

        let (err, alpha) = match seen.iter().find(|(h, _, _)| *h == hypotheses) {
            Some(&(_, err, alpha)) => (err, alpha),
            None => {
                let responses: Vec<Vec<f64>> = rows
                    .iter()
                    .map(|s| hypotheses.iter().map(|h| h.predict(&s.input())).collect())
                    .collect();
                let mut alpha = 0.0;
                let mut err = f64::INFINITY;
                for &a in &grid {
                    let e = error_after(&rows, &logs, &responses, a);
                    if e < err {
                        err = e;
                        alpha = a;
                    }
                }
                seen.push((hypotheses.clone(), err, alpha));
                (err, alpha)
            }
        };

        let incremental = costs.incremental_feature_cost(features, used);
        let objective = err + lambda * (costs.learner_cost + incremental);
        let types: Vec<usize> = features.iter().collect();
        let better = match &best {
            None => true,
            Some(b) => objective
                .total_cmp(&b.objective)
                .then(incremental.total_cmp(&b.incremental))
                .then(types.cmp(&b.types))
                .is_lt(),
        };
        if better {
            best = Some(Scored {
                learner: WeakLearner {
                    hypotheses,
                    alpha,
                    features,
                    apply_cost: costs.learner_cost,
                    lambda,
                },
                objective,
                incremental,
                types,
            });
        }
    }
    Ok(best.expect("candidate pool is never empty").learner)
}

/// Fits `stages` learners stage-wise, updating the samples' marginals with
/// each learner before fitting the next. Returns the learners and the
/// weighted squared error before the first and after every stage.
pub fn fit_learner_sequence(
    samples: &[ResidualSample],
    stages: usize,
    lambda: f64,
    used: FeatureSet,
    registry: &FeatureRegistry,
    costs: &CostModel,
    cfg: &BoostConfig,
) -> Result<(Vec<WeakLearner>, Vec<f64>)> {
    if stages == 0 {
        return Err(Error::Validation("learner sequence needs at least one stage".into()));
    }
    let mut work: Vec<ResidualSample> = samples.to_vec();
    let mut used = used;
    let mut learners = Vec::with_capacity(stages);
    let mut errors = vec![weighted_error(&work)];
    for _ in 0..stages {
        let learner = fit_weak_learner(&work, lambda, used, registry, costs, cfg)?;
        for s in work.iter_mut() {
            let q = learner.update(&s.current, &s.input());
            s.current = q;
        }
        used = used.union(learner.features);
        errors.push(weighted_error(&work));
        learners.push(learner);
    }
    Ok((learners, errors))
}
