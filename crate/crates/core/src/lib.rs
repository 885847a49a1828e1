//! Anytime semantic labeling with dynamic hierarchical models.
//!
//! An image is labeled coarse-to-fine over a segmentation tree: a state is a
//! cut of the tree with a label marginal per leaf, and two operators grow it
//! (split high-entropy leaves, or boost the newly created leaves with a weak
//! learner). A linear Q-function learned by least-squares policy iteration
//! picks the operator sequence per image so that labeling accuracy improves
//! as fast as possible per unit of computation cost.

pub mod artifact;
pub mod boost;
pub mod config;
pub mod dataset;
pub mod dhm;
pub mod error;
pub mod eval;
pub mod features;
pub mod pipeline;
pub mod policy;
pub mod segtree;

pub use artifact::{PolicyArtifact, Workspace};
pub use boost::{BoostConfig, ResidualSample, WeakLearner};
pub use config::RunConfig;
pub use dataset::{Dataset, ImageSample, Split, SyntheticSpec, VOID};
pub use dhm::{Action, BoostLearner, DhmState, Episode, Prior};
pub use error::{Error, Result};
pub use eval::{compute_metrics, Metrics, MetricCurve};
pub use features::{CostModel, FeatureRegistry, FeatureSet, ImageFeatures};
pub use policy::{ActionPool, Env, Policy, PolicyWeights, Runner, Scene};
pub use segtree::{HierarchyConfig, NodeId, SegTree};
