//! Nested multi-layer segmentation hierarchies.
//!
//! The finest layer comes from graph-based segmentation (Felzenszwalb &
//! Huttenlocher) on a 4-connected pixel grid, constrained to square blocks so
//! that every image yields enough fine regions. Coarser layers are produced by
//! greedy agglomeration of adjacent regions by mean-color distance, so nesting
//! holds by construction. Layer 0 is the single root.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::{ImageSample, VOID};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyConfig {
    pub layers: usize,
    /// Merge threshold `k` of the graph segmentation at the finest layer.
    pub k_fine: f64,
    /// Components smaller than this are merged into a neighbor.
    pub min_size: usize,
    /// Side of the square blocks the finest segmentation may not cross.
    pub block: usize,
    /// Gaussian pre-smoothing; `0` disables it.
    pub smooth_sigma: f64,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            k_fine: 300.0,
            min_size: 10,
            block: 16,
            smooth_sigma: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegNode {
    pub id: NodeId,
    pub layer: usize,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// Pixel count.
    pub area: usize,
    /// Labeled pixel count.
    pub labeled: usize,
    /// Labeled pixels normalized by the image's labeled pixels.
    pub weight: f64,
    /// Ground-truth label distribution over the node's labeled pixels.
    pub label_dist: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegTree {
    pub width: usize,
    pub height: usize,
    pub num_layers: usize,
    pub num_classes: usize,
    pub nodes: Vec<SegNode>,
    /// Per layer, row-major node id of every pixel.
    pub assignment: Vec<Vec<u32>>,
    pub annotated: bool,
}

impl SegTree {
    pub fn root(&self) -> NodeId {
        0
    }

    pub fn node(&self, id: NodeId) -> &SegNode {
        &self.nodes[id]
    }

    pub fn finest_layer(&self) -> usize {
        self.num_layers - 1
    }

    pub fn layer_nodes(&self, layer: usize) -> impl Iterator<Item = &SegNode> {
        self.nodes.iter().filter(move |n| n.layer == layer)
    }

    pub fn layer_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_layers];
        for n in &self.nodes {
            counts[n.layer] += 1;
        }
        counts
    }

    /// Normalized pixel area (not label-weighted).
    pub fn area_fraction(&self, id: NodeId) -> f64 {
        self.nodes[id].area as f64 / (self.width * self.height) as f64
    }

    /// Pixel indices covered by `id`.
    pub fn pixels_of(&self, id: NodeId) -> Vec<usize> {
        let layer = self.nodes[id].layer;
        self.assignment[layer]
            .iter()
            .enumerate()
            .filter(|(_, &n)| n as usize == id)
            .map(|(p, _)| p)
            .collect()
    }

    /// True when `anc` equals `id` or lies on its path to the root.
    pub fn is_ancestor_or_self(&self, anc: NodeId, mut id: NodeId) -> bool {
        loop {
            if id == anc {
                return true;
            }
            match self.nodes[id].parent {
                Some(p) if self.nodes[p].layer >= self.nodes[anc].layer => id = p,
                _ => return false,
            }
        }
    }
}

struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
    internal: Vec<f64>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let gp = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = gp;
            x = gp;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32, weight: f64) {
        let (big, small) = if self.size[a as usize] >= self.size[b as usize] { (a, b) } else { (b, a) };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        self.internal[big as usize] = weight.max(self.internal[big as usize]).max(self.internal[small as usize]);
    }
}

fn smooth(sample: &ImageSample, sigma: f64) -> Vec<[f64; 3]> {
    let (w, h) = (sample.width, sample.height);
    let src: Vec<[f64; 3]> = sample
        .pixels
        .iter()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    if sigma <= 0.0 {
        return src;
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= total);

    let pass = |input: &[[f64; 3]], horizontal: bool| -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for (ki, kv) in kernel.iter().enumerate() {
                    let d = ki as isize - radius;
                    let (sx, sy) = if horizontal {
                        ((x as isize + d).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + d).clamp(0, h as isize - 1) as usize)
                    };
                    let v = input[sy * w + sx];
                    for c in 0..3 {
                        acc[c] += kv * v[c];
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    let tmp = pass(&src, true);
    pass(&tmp, false)
}

fn color_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn effective_block(width: usize, height: usize, block: usize, layers: usize) -> usize {
    let mut b = block.max(1);
    while b > 1 && width.div_ceil(b) * height.div_ceil(b) < layers {
        b -= 1;
    }
    b
}

/// Block-constrained graph segmentation. Returns a dense region label per
/// pixel, numbered in raster order of first occurrence, and the region count.
fn segment_finest(sample: &ImageSample, cfg: &HierarchyConfig) -> (Vec<u32>, usize) {
    let (w, h) = (sample.width, sample.height);
    let color = smooth(sample, cfg.smooth_sigma);
    let block = effective_block(w, h, cfg.block, cfg.layers);
    let block_of = |x: usize, y: usize| (x / block, y / block);

    let mut edges: Vec<(f64, u32, u32)> = Vec::with_capacity(2 * w * h);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w && block_of(x, y) == block_of(x + 1, y) {
                edges.push((color_dist(&color[p], &color[p + 1]), p as u32, (p + 1) as u32));
            }
            if y + 1 < h && block_of(x, y) == block_of(x, y + 1) {
                edges.push((color_dist(&color[p], &color[p + w]), p as u32, (p + w) as u32));
            }
        }
    }
    // Stable: equal weights keep raster order.
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut uf = UnionFind::new(w * h);
    for &(weight, a, b) in &edges {
        let (ra, rb) = (uf.find(a), uf.find(b));
        if ra == rb {
            continue;
        }
        let ta = uf.internal[ra as usize] + cfg.k_fine / uf.size[ra as usize] as f64;
        let tb = uf.internal[rb as usize] + cfg.k_fine / uf.size[rb as usize] as f64;
        if weight <= ta.min(tb) {
            uf.union(ra, rb, weight);
        }
    }
    for &(weight, a, b) in &edges {
        let (ra, rb) = (uf.find(a), uf.find(b));
        if ra != rb
            && ((uf.size[ra as usize] as usize) < cfg.min_size || (uf.size[rb as usize] as usize) < cfg.min_size)
        {
            uf.union(ra, rb, weight);
        }
    }

    let mut dense = vec![u32::MAX; w * h];
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    for p in 0..w * h {
        let r = uf.find(p as u32) as usize;
        if dense[r] == u32::MAX {
            dense[r] = next;
            next += 1;
        }
        labels[p] = dense[r];
    }
    (labels, next as usize)
}

/// Region-count schedule from root (index 0) to the finest layer.
fn layer_targets(n_fine: usize, layers: usize) -> Vec<usize> {
    let mut targets = vec![0; layers];
    targets[layers - 1] = n_fine;
    for l in (0..layers - 1).rev() {
        let t = (n_fine as f64).powf(l as f64 / (layers - 1) as f64).round() as usize;
        targets[l] = t.clamp(1, targets[l + 1]);
    }
    targets[0] = 1;
    targets
}

/// Builds an `layers`-deep hierarchy. Node ids are assigned layer by layer
/// from the root, so a child's id is always larger than its parent's.
pub fn build_hierarchy(sample: &ImageSample, cfg: &HierarchyConfig) -> Result<SegTree> {
    sample.validate()?;
    if cfg.layers < 2 {
        return Err(Error::Config("hierarchy needs at least 2 layers".into()));
    }
    let (w, h) = (sample.width, sample.height);
    let (fine, n_fine) = segment_finest(sample, cfg);
    if n_fine < cfg.layers {
        return Err(Error::Validation(format!(
            "{}: finest layer has {n_fine} regions, fewer than {} layers",
            sample.id, cfg.layers
        )));
    }

    let mut area = vec![0usize; n_fine];
    let mut color_sum = vec![[0.0f64; 3]; n_fine];
    for (p, &r) in fine.iter().enumerate() {
        area[r as usize] += 1;
        for c in 0..3 {
            color_sum[r as usize][c] += sample.pixels[p][c] as f64;
        }
    }
    let mut neighbors: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n_fine];
    for y in 0..h {
        for x in 0..w {
            let a = fine[y * w + x];
            for b in [
                (x + 1 < w).then(|| fine[y * w + x + 1]),
                (y + 1 < h).then(|| fine[(y + 1) * w + x]),
            ]
            .into_iter()
            .flatten()
            {
                if a != b {
                    neighbors[a as usize].insert(b);
                    neighbors[b as usize].insert(a);
                }
            }
        }
    }

    // Cluster representative is the smallest fine-region id it contains.
    let mut rep: Vec<u32> = (0..n_fine as u32).collect();
    let mut alive: Vec<bool> = vec![true; n_fine];
    let targets = layer_targets(n_fine, cfg.layers);
    let mut layer_rep: Vec<Vec<u32>> = vec![Vec::new(); cfg.layers];
    layer_rep[cfg.layers - 1] = rep.clone();
    let mut count = n_fine;
    let mean = |r: usize, area: &[usize], color_sum: &[[f64; 3]]| {
        let a = area[r] as f64;
        [color_sum[r][0] / a, color_sum[r][1] / a, color_sum[r][2] / a]
    };

    for layer in (0..cfg.layers - 1).rev() {
        while count > targets[layer] {
            let mut best: Option<(f64, usize, u32, u32)> = None;
            for a in 0..n_fine {
                if !alive[a] {
                    continue;
                }
                let ma = mean(a, &area, &color_sum);
                for &b in neighbors[a].range(a as u32 + 1..) {
                    let key = (
                        color_dist(&ma, &mean(b as usize, &area, &color_sum)),
                        area[a] + area[b as usize],
                        a as u32,
                        b,
                    );
                    let better = match &best {
                        None => true,
                        Some(cur) => key
                            .0
                            .total_cmp(&cur.0)
                            .then(key.1.cmp(&cur.1))
                            .then((key.2, key.3).cmp(&(cur.2, cur.3)))
                            .is_lt(),
                    };
                    if better {
                        best = Some(key);
                    }
                }
            }
            let (_, _, a, b) = best.ok_or_else(|| {
                Error::Degenerate(format!("{}: region adjacency graph is disconnected", sample.id))
            })?;
            let (a, b) = (a as usize, b as usize);
            alive[b] = false;
            area[a] += area[b];
            for c in 0..3 {
                color_sum[a][c] += color_sum[b][c];
            }
            let moved: Vec<u32> = std::mem::take(&mut neighbors[b]).into_iter().collect();
            for n in moved {
                neighbors[n as usize].remove(&(b as u32));
                if n as usize != a {
                    neighbors[n as usize].insert(a as u32);
                    neighbors[a].insert(n);
                }
            }
            neighbors[a].remove(&(a as u32));
            for r in rep.iter_mut() {
                if *r == b as u32 {
                    *r = a as u32;
                }
            }
            count -= 1;
        }
        layer_rep[layer] = rep.clone();
    }

    let mut nodes: Vec<SegNode> = Vec::new();
    // node id by (layer, representative)
    let mut node_of: Vec<Vec<u32>> = vec![vec![u32::MAX; n_fine]; cfg.layers];
    for layer in 0..cfg.layers {
        let reps: BTreeSet<u32> = layer_rep[layer].iter().copied().collect();
        for r in reps {
            let id = nodes.len();
            node_of[layer][r as usize] = id as u32;
            let parent = (layer > 0).then(|| node_of[layer - 1][layer_rep[layer - 1][r as usize] as usize] as usize);
            if let Some(p) = parent {
                nodes[p].children.push(id);
            }
            nodes.push(SegNode {
                id,
                layer,
                parent,
                children: Vec::new(),
                area: 0,
                labeled: 0,
                weight: 0.0,
                label_dist: vec![1.0 / sample.num_classes as f64; sample.num_classes],
            });
        }
    }

    let mut assignment = vec![vec![0u32; w * h]; cfg.layers];
    for (layer, assign) in assignment.iter_mut().enumerate() {
        for (p, &r) in fine.iter().enumerate() {
            let id = node_of[layer][layer_rep[layer][r as usize] as usize];
            assign[p] = id;
            nodes[id as usize].area += 1;
        }
    }

    Ok(SegTree {
        width: w,
        height: h,
        num_layers: cfg.layers,
        num_classes: sample.num_classes,
        nodes,
        assignment,
        annotated: false,
    })
}

/// Fills every node's ground-truth label distribution and normalized size.
/// Nodes without labeled pixels get weight 0 and a uniform distribution.
pub fn annotate_ground_truth(mut tree: SegTree, sample: &ImageSample) -> Result<SegTree> {
    if (tree.width, tree.height) != (sample.width, sample.height) {
        return Err(Error::DimensionMismatch {
            id: sample.id.clone(),
            expected: (tree.height, tree.width),
            found: (sample.height, sample.width),
        });
    }
    let k = sample.num_classes;
    tree.num_classes = k;
    let mut hist = vec![vec![0u64; k]; tree.nodes.len()];
    for assign in &tree.assignment {
        for (p, &id) in assign.iter().enumerate() {
            let l = sample.labels[p];
            if l != VOID {
                hist[id as usize][l as usize] += 1;
            }
        }
    }
    let total = sample.labels.iter().filter(|&&l| l != VOID).count();
    for (node, h) in tree.nodes.iter_mut().zip(hist) {
        let labeled: u64 = h.iter().sum();
        node.labeled = labeled as usize;
        if labeled == 0 || total == 0 {
            node.weight = 0.0;
            node.label_dist = vec![1.0 / k as f64; k];
        } else {
            node.weight = labeled as f64 / total as f64;
            node.label_dist = h.iter().map(|&c| c as f64 / labeled as f64).collect();
        }
    }
    tree.annotated = true;
    Ok(tree)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeViolation {
    RootCount(usize),
    LayerOrdering { node: NodeId, parent: NodeId },
    ChildLink { node: NodeId, child: NodeId },
    Partition { layer: usize, node: NodeId },
    Nesting { layer: usize, pixel: usize },
    FinestHasChildren(NodeId),
    Weight { node: NodeId, weight: f64 },
    LayerMass { layer: usize, total: f64 },
    Distribution(NodeId),
    MassConservation(NodeId),
}

impl fmt::Display for TreeViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeViolation::RootCount(n) => write!(f, "expected exactly one root, found {n}"),
            TreeViolation::LayerOrdering { node, parent } => {
                write!(f, "layer ordering: node {node} is not one layer below parent {parent}")
            }
            TreeViolation::ChildLink { node, child } => {
                write!(f, "child {child} of node {node} does not point back to it")
            }
            TreeViolation::Partition { layer, node } => {
                write!(f, "partition: pixel count of node {node} at layer {layer} disagrees with its area")
            }
            TreeViolation::Nesting { layer, pixel } => {
                write!(f, "nesting: pixel {pixel} at layer {layer} is not inside its parent region")
            }
            TreeViolation::FinestHasChildren(n) => write!(f, "finest-layer node {n} has children"),
            TreeViolation::Weight { node, weight } => write!(f, "node {node} has weight {weight} outside [0,1]"),
            TreeViolation::LayerMass { layer, total } => write!(f, "layer {layer} weights sum to {total}"),
            TreeViolation::Distribution(n) => write!(f, "label distribution of node {n} is not normalized"),
            TreeViolation::MassConservation(n) => {
                write!(f, "weighted label mass of node {n} differs from the sum over its children")
            }
        }
    }
}

impl std::error::Error for TreeViolation {}

/// Checks every structural invariant; annotation invariants are checked only
/// on annotated trees.
pub fn validate_tree(tree: &SegTree) -> std::result::Result<(), TreeViolation> {
    let roots = tree.nodes.iter().filter(|n| n.parent.is_none()).count();
    if roots != 1 || tree.nodes.first().map(|n| n.layer) != Some(0) {
        return Err(TreeViolation::RootCount(roots));
    }
    for n in &tree.nodes {
        if let Some(p) = n.parent {
            if n.layer != tree.nodes[p].layer + 1 {
                return Err(TreeViolation::LayerOrdering { node: n.id, parent: p });
            }
        }
        for &c in &n.children {
            if tree.nodes[c].parent != Some(n.id) {
                return Err(TreeViolation::ChildLink { node: n.id, child: c });
            }
        }
        if n.layer == tree.finest_layer() && !n.children.is_empty() {
            return Err(TreeViolation::FinestHasChildren(n.id));
        }
    }
    for (layer, assign) in tree.assignment.iter().enumerate() {
        let mut counts = vec![0usize; tree.nodes.len()];
        for &id in assign {
            counts[id as usize] += 1;
        }
        for n in &tree.nodes {
            let expected = if n.layer == layer { n.area } else { 0 };
            if counts[n.id] != expected {
                return Err(TreeViolation::Partition { layer, node: n.id });
            }
        }
        if layer > 0 {
            for (p, &id) in assign.iter().enumerate() {
                if tree.nodes[id as usize].parent != Some(tree.assignment[layer - 1][p] as usize) {
                    return Err(TreeViolation::Nesting { layer, pixel: p });
                }
            }
        }
    }
    if tree.annotated {
        for layer in 0..tree.num_layers {
            let total: f64 = tree.layer_nodes(layer).map(|n| n.weight).sum();
            let any_labeled = tree.layer_nodes(layer).any(|n| n.labeled > 0);
            if any_labeled && (total - 1.0).abs() > 1e-9 {
                return Err(TreeViolation::LayerMass { layer, total });
            }
        }
        for n in &tree.nodes {
            if !(0.0..=1.0).contains(&n.weight) {
                return Err(TreeViolation::Weight { node: n.id, weight: n.weight });
            }
            if (n.label_dist.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(TreeViolation::Distribution(n.id));
            }
            if !n.children.is_empty() {
                for k in 0..tree.num_classes {
                    let own = n.weight * n.label_dist[k];
                    let sum: f64 = n
                        .children
                        .iter()
                        .map(|&c| tree.nodes[c].weight * tree.nodes[c].label_dist[k])
                        .sum();
                    if (own - sum).abs() > 1e-9 {
                        return Err(TreeViolation::MassConservation(n.id));
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};

    fn sample() -> ImageSample {
        generate_synthetic(&SyntheticSpec::default(), 1).unwrap().samples.remove(0)
    }

    fn uniform(w: usize, h: usize) -> ImageSample {
        ImageSample {
            id: "flat".into(),
            width: w,
            height: h,
            pixels: vec![[90, 90, 90]; w * h],
            labels: vec![0; w * h],
            num_classes: 2,
            channels: vec![],
        }
    }

    #[test]
    fn built_tree_is_valid_and_counts_shrink() {
        let s = sample();
        let tree = annotate_ground_truth(build_hierarchy(&s, &HierarchyConfig::default()).unwrap(), &s).unwrap();
        validate_tree(&tree).unwrap();
        let counts = tree.layer_counts();
        assert_eq!(counts[0], 1);
        assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
        assert!(counts[7] >= 8);
    }

    #[test]
    fn children_partition_parent_pixels() {
        let s = sample();
        let tree = build_hierarchy(&s, &HierarchyConfig::default()).unwrap();
        for n in tree.nodes.iter().filter(|n| !n.children.is_empty()) {
            let mut union: Vec<usize> = n.children.iter().flat_map(|&c| tree.pixels_of(c)).collect();
            union.sort_unstable();
            assert_eq!(union, tree.pixels_of(n.id));
        }
    }

    #[test]
    fn uniform_image_still_builds() {
        let s = uniform(64, 64);
        let tree = build_hierarchy(&s, &HierarchyConfig::default()).unwrap();
        validate_tree(&tree).unwrap();
        assert_eq!(tree.layer_counts()[7], 16);
        let tiny = build_hierarchy(&uniform(8, 8), &HierarchyConfig::default()).unwrap();
        validate_tree(&tiny).unwrap();
        assert!(tiny.layer_counts()[7] >= 8);
    }

    #[test]
    fn histogram_annotation() {
        let mut s = uniform(8, 8);
        s.num_classes = 3;
        s.labels = vec![VOID; 64];
        s.labels[0] = 1;
        s.labels[1] = 1;
        s.labels[2] = 2;
        let tree = annotate_ground_truth(build_hierarchy(&s, &HierarchyConfig::default()).unwrap(), &s).unwrap();
        let root = tree.node(0);
        assert_eq!(root.labeled, 3);
        assert!((root.label_dist[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((root.label_dist[2] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(root.weight, 1.0);
        validate_tree(&tree).unwrap();
    }

    #[test]
    fn injected_faults_are_reported() {
        let s = sample();
        let tree = build_hierarchy(&s, &HierarchyConfig::default()).unwrap();
        let parent = tree.nodes.iter().find(|n| n.children.len() >= 2).unwrap();
        let (a, b) = (parent.children[0], parent.children[1]);
        let layer = tree.node(a).layer;
        let mut broken = tree.clone();
        let p = broken.pixels_of(a)[0];
        broken.assignment[layer][p] = b as u32;
        assert!(matches!(validate_tree(&broken), Err(TreeViolation::Partition { .. })));

        let mut broken = tree.clone();
        broken.nodes[a].layer = broken.nodes[parent.id].layer;
        assert!(matches!(validate_tree(&broken), Err(TreeViolation::LayerOrdering { .. })));
    }

    #[test]
    fn deterministic_build() {
        let s = sample();
        let a = build_hierarchy(&s, &HierarchyConfig::default()).unwrap();
        let b = build_hierarchy(&s, &HierarchyConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
