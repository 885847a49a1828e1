//! Region feature extraction by feature type, and the deterministic cost
//! model charged by every action.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::segtree::{NodeId, SegTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    /// Per-channel mean and standard deviation of RGB.
    ColorStat,
    /// Normalized centroid and bounding-box extent.
    Position,
    /// 8-bin magnitude-weighted gradient orientation histogram.
    GradientHist,
    /// 16-bin histogram of 4-neighbour local binary pattern codes.
    LbpHist,
    /// Mean of one auxiliary per-pixel channel.
    SyntheticChannel { channel: usize },
}

impl FeatureKind {
    pub fn dim(&self) -> usize {
        match self {
            FeatureKind::ColorStat => 6,
            FeatureKind::Position => 4,
            FeatureKind::GradientHist => 8,
            FeatureKind::LbpHist => 16,
            FeatureKind::SyntheticChannel { .. } => 1,
        }
    }

    /// Dimensions that are area-weighted means over pixels (and therefore
    /// pool exactly from children).
    pub fn mean_pooled_dims(&self) -> std::ops::Range<usize> {
        match self {
            FeatureKind::ColorStat => 0..3,
            FeatureKind::Position => 0..2,
            other => 0..other.dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureType {
    pub id: usize,
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
    /// Whole-image extraction cost.
    pub cost: f64,
}

impl FeatureType {
    pub fn dim(&self) -> usize {
        self.kind.dim()
    }
}

/// Small set of feature-type ids, stored as a bitmask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureSet(pub u64);

impl FeatureSet {
    pub fn empty() -> Self {
        Self(0)
    }

    pub fn insert(&mut self, id: usize) {
        self.0 |= 1 << id;
    }

    pub fn contains(&self, id: usize) -> bool {
        self.0 & (1 << id) != 0
    }

    pub fn union(self, other: Self) -> Self {
        Self(self.0 | other.0)
    }

    pub fn difference(self, other: Self) -> Self {
        Self(self.0 & !other.0)
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..64).filter(move |&i| self.contains(i))
    }
}

impl FromIterator<usize> for FeatureSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        let mut s = Self::empty();
        for i in iter {
            s.insert(i);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRegistry {
    pub types: Vec<FeatureType>,
}

impl FeatureRegistry {
    pub fn new(types: Vec<FeatureType>) -> Result<Self> {
        if types.len() > 64 {
            return Err(Error::Config("at most 64 feature types are supported".into()));
        }
        for (i, t) in types.iter().enumerate() {
            if t.id != i {
                return Err(Error::Config(format!("feature ids must be dense; found {} at {i}", t.id)));
            }
            if !(t.cost >= 0.0) {
                return Err(Error::Config(format!("feature {} has negative cost", t.name)));
            }
        }
        Ok(Self { types })
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&FeatureType> {
        self.types.get(id).ok_or(Error::UnknownFeature(id))
    }

    /// Offset of each type's block inside the stacked feature vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.types
            .iter()
            .map(|t| {
                let o = acc;
                acc += t.dim();
                o
            })
            .collect()
    }

    pub fn total_dim(&self) -> usize {
        self.types.iter().map(|t| t.dim()).sum()
    }

    /// Feature type owning stacked column `col`, or `None` for the
    /// parent-marginal block that follows all feature types.
    pub fn type_of_column(&self, col: usize) -> Option<usize> {
        let mut acc = 0;
        for t in &self.types {
            acc += t.dim();
            if col < acc {
                return Some(t.id);
            }
        }
        None
    }

    /// Cheap color/position, mid-cost texture and two auxiliary channels.
    /// Costs are order-of-magnitude defaults, not measured timings.
    pub fn default_six() -> Self {
        let t = |id, name: &str, kind, cost| FeatureType {
            id,
            name: name.into(),
            kind,
            cost,
        };
        Self::new(vec![
            t(0, "color", FeatureKind::ColorStat, 1.0),
            t(1, "position", FeatureKind::Position, 0.5),
            t(2, "gradient", FeatureKind::GradientHist, 4.0),
            t(3, "lbp", FeatureKind::LbpHist, 6.0),
            t(4, "aux0", FeatureKind::SyntheticChannel { channel: 0 }, 10.0),
            t(5, "aux1", FeatureKind::SyntheticChannel { channel: 1 }, 3.0),
        ])
        .expect("default registry is valid")
    }
}

/// Features of selected nodes for one feature type.
pub type RegionFeatures = BTreeMap<NodeId, Vec<f64>>;

/// Additive per-node accumulators for one feature type.
#[derive(Clone)]
struct Accum {
    sums: Vec<f64>,
    bbox: [usize; 4],
}

fn gray(p: &[u8; 3]) -> f64 {
    (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0
}

/// Per-pixel contributions of one feature type; summed over a region and
/// divided by its area they give the mean-pooled dimensions.
fn pixel_terms(kind: FeatureKind, sample: &ImageSample) -> Result<Vec<Vec<f64>>> {
    let (w, h) = (sample.width, sample.height);
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        gray(&sample.pixels[y * w + x])
    };
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let p = &sample.pixels[y * w + x];
            let v = match kind {
                FeatureKind::ColorStat => {
                    let c = [p[0] as f64, p[1] as f64, p[2] as f64];
                    vec![c[0], c[1], c[2], c[0] * c[0], c[1] * c[1], c[2] * c[2]]
                }
                FeatureKind::Position => {
                    vec![(x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64]
                }
                FeatureKind::GradientHist => {
                    let (xi, yi) = (x as isize, y as isize);
                    let gx = (at(xi + 1, yi) - at(xi - 1, yi)) / 2.0;
                    let gy = (at(xi, yi + 1) - at(xi, yi - 1)) / 2.0;
                    let mag = (gx * gx + gy * gy).sqrt() / 255.0;
                    let mut bins = vec![0.0; 8];
                    if mag > 0.0 {
                        let theta = gy.atan2(gx).rem_euclid(PI);
                        bins[((theta / PI * 8.0) as usize).min(7)] = mag;
                    }
                    bins
                }
                FeatureKind::LbpHist => {
                    let (xi, yi) = (x as isize, y as isize);
                    let c = gray(p);
                    let code = [(0, -1), (1, 0), (0, 1), (-1, 0)]
                        .iter()
                        .enumerate()
                        .fold(0usize, |acc, (bit, (dx, dy))| {
                            acc | (((at(xi + dx, yi + dy) >= c) as usize) << bit)
                        });
                    let mut bins = vec![0.0; 16];
                    bins[code] = 1.0;
                    bins
                }
                FeatureKind::SyntheticChannel { channel } => {
                    let ch = sample.channels.get(channel).ok_or_else(|| {
                        Error::Validation(format!("{} has no auxiliary channel {channel}", sample.id))
                    })?;
                    vec![ch[y * w + x] as f64 / 255.0]
                }
            };
            out.push(v);
        }
    }
    Ok(out)
}

fn accumulate(kind: FeatureKind, sample: &ImageSample, tree: &SegTree) -> Result<Vec<Accum>> {
    let terms = pixel_terms(kind, sample)?;
    let width = terms.first().map_or(0, |t| t.len());
    let mut acc = vec![
        Accum {
            sums: vec![0.0; width],
            bbox: [usize::MAX, usize::MAX, 0, 0],
        };
        tree.nodes.len()
    ];
    let finest = &tree.assignment[tree.finest_layer()];
    for (p, t) in terms.iter().enumerate() {
        let a = &mut acc[finest[p] as usize];
        for (s, v) in a.sums.iter_mut().zip(t) {
            *s += v;
        }
        let (x, y) = (p % tree.width, p / tree.width);
        a.bbox = [a.bbox[0].min(x), a.bbox[1].min(y), a.bbox[2].max(x), a.bbox[3].max(y)];
    }
    // Children always carry larger ids than their parents.
    for id in (0..tree.nodes.len()).rev() {
        if let Some(parent) = tree.nodes[id].parent {
            let child = acc[id].clone();
            let a = &mut acc[parent];
            for (s, v) in a.sums.iter_mut().zip(&child.sums) {
                *s += v;
            }
            a.bbox = [
                a.bbox[0].min(child.bbox[0]),
                a.bbox[1].min(child.bbox[1]),
                a.bbox[2].max(child.bbox[2]),
                a.bbox[3].max(child.bbox[3]),
            ];
        }
    }
    Ok(acc)
}

fn finalize(kind: FeatureKind, acc: &Accum, area: usize, tree: &SegTree) -> Vec<f64> {
    let n = area as f64;
    match kind {
        FeatureKind::ColorStat => {
            let mut v = vec![0.0; 6];
            for c in 0..3 {
                let (s1, s2) = (acc.sums[c], acc.sums[3 + c]);
                v[c] = s1 / n / 255.0;
                v[3 + c] = (n * s2 - s1 * s1).max(0.0).sqrt() / n / 255.0;
            }
            v
        }
        FeatureKind::Position => vec![
            acc.sums[0] / n,
            acc.sums[1] / n,
            (acc.bbox[2] + 1 - acc.bbox[0]) as f64 / tree.width as f64,
            (acc.bbox[3] + 1 - acc.bbox[1]) as f64 / tree.height as f64,
        ],
        _ => acc.sums.iter().map(|s| s / n).collect(),
    }
}

/// Features of `nodes` for one registered feature type.
pub fn compute_feature(
    registry: &FeatureRegistry,
    type_id: usize,
    sample: &ImageSample,
    tree: &SegTree,
    nodes: &[NodeId],
) -> Result<RegionFeatures> {
    let ft = registry.get(type_id)?;
    let acc = accumulate(ft.kind, sample, tree)?;
    Ok(nodes
        .iter()
        .map(|&id| (id, finalize(ft.kind, &acc[id], tree.nodes[id].area, tree)))
        .collect())
}

/// Cached features of every node of one image, stacked in registry order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFeatures {
    offsets: Vec<usize>,
    dims: Vec<usize>,
    /// Per node, the concatenation of every type's vector.
    stacked: Vec<Vec<f64>>,
}

impl ImageFeatures {
    pub fn extract(registry: &FeatureRegistry, sample: &ImageSample, tree: &SegTree) -> Result<Self> {
        let offsets = registry.offsets();
        let total = registry.total_dim();
        let mut stacked = vec![Vec::with_capacity(total); tree.nodes.len()];
        for ft in &registry.types {
            let acc = accumulate(ft.kind, sample, tree)?;
            for (id, row) in stacked.iter_mut().enumerate() {
                row.extend(finalize(ft.kind, &acc[id], tree.nodes[id].area, tree));
            }
        }
        Ok(Self {
            offsets,
            dims: registry.types.iter().map(|t| t.dim()).collect(),
            stacked,
        })
    }

    pub fn stacked(&self, node: NodeId) -> &[f64] {
        &self.stacked[node]
    }

    pub fn get(&self, node: NodeId, type_id: usize) -> &[f64] {
        let o = self.offsets[type_id];
        &self.stacked[node][o..o + self.dims[type_id]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Whole-image extraction cost per feature type id.
    pub feature_costs: Vec<f64>,
    /// `c_r`: cost per newly created region of a split.
    pub split_cost: f64,
    /// `c_h`: cost of applying one weak learner to the active regions.
    pub learner_cost: f64,
    /// `c_0`: hierarchy construction, charged before any action.
    pub initial_cost: f64,
}

impl CostModel {
    pub fn new(registry: &FeatureRegistry, split_cost: f64, learner_cost: f64, initial_cost: f64) -> Result<Self> {
        if split_cost < 0.0 || learner_cost < 0.0 || initial_cost < 0.0 {
            return Err(Error::Config("costs must be nonnegative".into()));
        }
        Ok(Self {
            feature_costs: registry.types.iter().map(|t| t.cost).collect(),
            split_cost,
            learner_cost,
            initial_cost,
        })
    }

    /// Extraction cost of the types in `wanted` that are not yet in `used`.
    pub fn incremental_feature_cost(&self, wanted: FeatureSet, used: FeatureSet) -> f64 {
        wanted.difference(used).iter().map(|i| self.feature_costs[i]).sum()
    }

    /// Sum of every feature type's cost; used as a normalization scale.
    pub fn total_feature_cost(&self) -> f64 {
        self.feature_costs.iter().sum()
    }
}

/// What an action needs to be priced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CostQuery {
    Split { new_regions: usize },
    Boost { stages: usize, features: FeatureSet },
}

/// Boost: `stages * c_h` plus first-use extraction of each feature type.
/// Split: `c_r` per newly created region.
pub fn action_cost(query: CostQuery, model: &CostModel, used: FeatureSet) -> f64 {
    match query {
        CostQuery::Split { new_regions } => model.split_cost * new_regions as f64,
        CostQuery::Boost { stages, features } => {
            model.learner_cost * stages as f64 + model.incremental_feature_cost(features, used)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};
    use crate::segtree::{build_hierarchy, HierarchyConfig};

    fn setup() -> (ImageSample, SegTree) {
        let s = generate_synthetic(&SyntheticSpec::default(), 1).unwrap().samples.remove(0);
        let t = build_hierarchy(&s, &HierarchyConfig::default()).unwrap();
        (s, t)
    }

    #[test]
    fn uniform_gray_has_zero_std() {
        let (mut s, _) = setup();
        s.pixels.iter_mut().for_each(|p| *p = [120, 120, 120]);
        let t = build_hierarchy(&s, &HierarchyConfig::default()).unwrap();
        let reg = FeatureRegistry::default_six();
        let f = compute_feature(&reg, 0, &s, &t, &[0]).unwrap();
        assert!(f[&0][3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn whole_image_centroid() {
        let (s, t) = setup();
        let reg = FeatureRegistry::default_six();
        let f = compute_feature(&reg, 1, &s, &t, &[0]).unwrap();
        let tol = 1.0 / 64.0;
        assert!((f[&0][0] - 0.5).abs() <= tol && (f[&0][1] - 0.5).abs() <= tol);
        assert_eq!(&f[&0][2..], &[1.0, 1.0]);
    }

    #[test]
    fn unknown_type_is_error() {
        let (s, t) = setup();
        let reg = FeatureRegistry::default_six();
        assert!(matches!(compute_feature(&reg, 9, &s, &t, &[0]), Err(Error::UnknownFeature(9))));
    }

    #[test]
    fn cached_features_match_direct_computation() {
        let (s, t) = setup();
        let reg = FeatureRegistry::default_six();
        let cache = ImageFeatures::extract(&reg, &s, &t).unwrap();
        let ids: Vec<NodeId> = (0..t.nodes.len()).collect();
        for ty in 0..reg.len() {
            let direct = compute_feature(&reg, ty, &s, &t, &ids).unwrap();
            for &id in &ids {
                assert_eq!(cache.get(id, ty), direct[&id].as_slice());
            }
        }
    }

    #[test]
    fn first_use_charging() {
        let reg = FeatureRegistry::default_six();
        let model = CostModel::new(&reg, 0.5, 0.2, 1.0).unwrap();
        let used: FeatureSet = [2, 5].into_iter().collect();
        let q = CostQuery::Boost {
            stages: 1,
            features: [2, 5].into_iter().collect(),
        };
        assert_eq!(action_cost(q, &model, used), 0.2);
        let q = CostQuery::Boost {
            stages: 2,
            features: [0, 5].into_iter().collect(),
        };
        assert!((action_cost(q, &model, used) - (0.4 + 1.0)).abs() < 1e-12);
        assert_eq!(action_cost(CostQuery::Split { new_regions: 6 }, &model, used), 3.0);
        assert_eq!(action_cost(CostQuery::Split { new_regions: 0 }, &model, used), 0.0);
    }

    #[test]
    fn registry_rejects_sparse_ids() {
        let mut types = FeatureRegistry::default_six().types;
        types[3].id = 7;
        assert!(FeatureRegistry::new(types).is_err());
    }
}
