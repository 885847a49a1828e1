//! Run configuration read from TOML; its hash stamps every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boost::BoostConfig;
use crate::dataset::SyntheticSpec;
use crate::error::{Error, Result};
use crate::features::{CostModel, FeatureRegistry, FeatureType};
use crate::policy::{LspiConfig, ProposalConfig, RolloutConfig};
use crate::segtree::HierarchyConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with `images/` and `labels/`; synthetic data when absent.
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    /// Number of synthetic images.
    #[serde(default = "default_count")]
    pub count: usize,
    pub num_classes: usize,
    /// Train, validation and test fractions.
    pub fractions: [f64; 3],
    pub split_seed: u64,
}

fn default_count() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub split: f64,
    pub learner: f64,
    pub initial: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Uniform,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub budgets: usize,
    pub random_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub hierarchy: HierarchyConfig,
    pub features: Vec<FeatureType>,
    pub costs: CostConfig,
    /// Weight of the region-entropy term of the labeling loss.
    pub loss_weight: f64,
    pub prior: PriorKind,
    pub boost: BoostConfig,
    pub proposal: ProposalConfig,
    pub lspi: LspiConfig,
    pub rollout: RolloutConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig {
                root: None,
                synthetic: Some(SyntheticSpec::default()),
                count: 100,
                num_classes: 4,
                fractions: [0.6, 0.2, 0.2],
                split_seed: 1,
            },
            hierarchy: HierarchyConfig::default(),
            features: FeatureRegistry::default_six().types,
            costs: CostConfig {
                split: 0.02,
                learner: 0.25,
                initial: 2.0,
            },
            loss_weight: 1.0,
            prior: PriorKind::Global,
            boost: BoostConfig::default(),
            proposal: ProposalConfig::default(),
            lspi: LspiConfig::default(),
            rollout: RolloutConfig::default(),
            eval: EvalConfig {
                budgets: 12,
                random_seed: 5,
            },
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.root.is_none() && d.synthetic.is_none() {
            return Err(Error::Config("data needs either root or synthetic".into()));
        }
        if let Some(s) = &d.synthetic {
            s.validate()?;
            if s.num_classes != d.num_classes {
                return Err(Error::Config("synthetic class count differs from data.num_classes".into()));
            }
        }
        if (d.fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 || d.fractions.iter().any(|f| *f < 0.0) {
            return Err(Error::Config("split fractions must be nonnegative and sum to 1".into()));
        }
        if self.hierarchy.layers < 2 {
            return Err(Error::Config("hierarchy needs at least 2 layers".into()));
        }
        self.registry()?;
        self.cost_model()?;
        if self.loss_weight < 0.0 {
            return Err(Error::Config("loss weight must be nonnegative".into()));
        }
        if self.proposal.horizon == 0 || self.rollout.horizon == 0 {
            return Err(Error::Config("horizons must be positive".into()));
        }
        if self.proposal.stages.iter().any(|&p| p == 0) {
            return Err(Error::Config("stage counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lspi.gamma) || !(self.lspi.beta > 0.0) {
            return Err(Error::Config("need gamma in [0, 1] and beta > 0".into()));
        }
        if self.eval.budgets < 2 {
            return Err(Error::Config("budget grid needs at least 2 points".into()));
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<FeatureRegistry> {
        FeatureRegistry::new(self.features.clone())
    }

    pub fn cost_model(&self) -> Result<CostModel> {
        CostModel::new(&self.registry()?, self.costs.split, self.costs.learner, self.costs.initial)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_json(self)
    }

    /// Hash of the settings a segmentation tree depends on.
    pub fn hierarchy_hash(&self) -> String {
        hash_json(&self.hierarchy)
    }
}

pub(crate) fn hash_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(json))
}
