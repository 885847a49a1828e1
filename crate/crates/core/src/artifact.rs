//! Versioned JSON artifacts stamped with the hash of the config that made
//! them, and the on-disk workspace the CLI reads and writes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::eval::{normalized_curve, write_curves_csv};
use crate::pipeline::{build_tree, compare, load_data, Comparison, Method, Prepared, Trained};
use crate::policy::{ActionPool, LspiIteration, PolicyWeights};
use crate::segtree::SegTree;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub version: u32,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    header: Header,
    payload: T,
}

pub fn save<T: Serialize>(path: &Path, kind: &str, config_hash: &str, payload: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let envelope = Envelope {
        header: Header {
            kind: kind.to_string(),
            version: FORMAT_VERSION,
            config_hash: config_hash.to_string(),
        },
        payload,
    };
    let mut text = serde_json::to_string_pretty(&envelope)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads an artifact, failing if it is missing, of another kind or format
/// version, or stamped with a different config hash.
pub fn load<T: DeserializeOwned>(path: &Path, kind: &str, config_hash: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile {
            path: path.to_path_buf(),
            reason: format!("no {kind} artifact; run the command that builds it first"),
        },
        _ => Error::io(path, e),
    })?;
    let envelope: Envelope<T> = serde_json::from_str(&text)?;
    let h = envelope.header;
    if h.kind != kind {
        return Err(Error::Validation(format!("{}: expected a {kind} artifact, found {}", path.display(), h.kind)));
    }
    if h.version != FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "{}: format version {} is not supported (expected {FORMAT_VERSION})",
            path.display(),
            h.version
        )));
    }
    if h.config_hash != config_hash {
        return Err(Error::StaleArtifact {
            path: path.to_path_buf(),
            expected: config_hash.to_string(),
            found: h.config_hash,
        });
    }
    Ok(envelope.payload)
}

/// Contents of the policy file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyArtifact {
    pub weights: PolicyWeights,
    /// The S-M sequence as pool indices.
    pub static_sequence: Vec<usize>,
    pub history: Vec<LspiIteration>,
    pub val_auc: f64,
}

/// A work directory holding the artifacts of one config.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
    pub config: RunConfig,
    hash: String,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, config: RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            root: root.into(),
            hash: config.hash(),
            config,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn tree_path(&self, id: &str) -> PathBuf {
        self.root.join("trees").join(format!("{id}.json"))
    }

    pub fn pool_path(&self) -> PathBuf {
        self.root.join("pool.json")
    }

    pub fn policy_path(&self) -> PathBuf {
        self.root.join("policy.json")
    }

    /// Builds and caches the tree of every image; returns the image count.
    pub fn build_trees(&self) -> Result<usize> {
        let dataset = load_data(&self.config)?;
        for s in &dataset.samples {
            let tree = build_tree(s, &self.config)?;
            save(&self.tree_path(&s.id), "tree", &self.hash, &tree)?;
        }
        Ok(dataset.len())
    }

    /// Data plus cached trees and extracted features.
    pub fn prepare(&self) -> Result<Prepared> {
        let dataset = load_data(&self.config)?;
        let trees = dataset
            .samples
            .iter()
            .map(|s| load::<SegTree>(&self.tree_path(&s.id), "tree", &self.hash))
            .collect::<Result<Vec<_>>>()?;
        Prepared::with_trees(&self.config, dataset, trees)
    }

    pub fn propose(&self, prepared: &Prepared) -> Result<ActionPool> {
        let pool = prepared.propose(&self.config)?;
        save(&self.pool_path(), "action_pool", &self.hash, &pool)?;
        Ok(pool)
    }

    pub fn load_pool(&self) -> Result<ActionPool> {
        let pool: ActionPool = load(&self.pool_path(), "action_pool", &self.hash)?;
        pool.validate()?;
        Ok(pool)
    }

    pub fn train(&self, prepared: &Prepared, pool: &ActionPool) -> Result<PolicyArtifact> {
        let static_sequence = prepared.static_sequence(&self.config, pool)?;
        let outcome = prepared.train(&self.config, pool)?;
        let artifact = PolicyArtifact {
            weights: outcome.weights,
            static_sequence,
            history: outcome.history,
            val_auc: outcome.val_auc,
        };
        save(&self.policy_path(), "policy", &self.hash, &artifact)?;
        Ok(artifact)
    }

    /// The policy file, checked against the pool it was trained on.
    pub fn load_policy(&self, pool: &ActionPool) -> Result<PolicyArtifact> {
        let path = self.policy_path();
        let artifact: PolicyArtifact = load(&path, "policy", &self.hash)?;
        let hash = pool.content_hash();
        if artifact.weights.pool_hash != hash {
            return Err(Error::StaleArtifact {
                path,
                expected: hash,
                found: artifact.weights.pool_hash,
            });
        }
        if artifact.weights.eta.len() != artifact.weights.layout.dim() || artifact.weights.layout.pool_size != pool.len() {
            return Err(Error::Validation("policy weights do not match the pool layout".into()));
        }
        if artifact.static_sequence.iter().any(|&i| i >= pool.len()) {
            return Err(Error::Validation("static sequence refers to actions outside the pool".into()));
        }
        Ok(artifact)
    }

    /// Predicted label map of image `id` under `method` within `budget`.
    pub fn predict(&self, prepared: &Prepared, pool: &ActionPool, policy: &PolicyArtifact, method: Method, id: &str, budget: f64) -> Result<Vec<u8>> {
        let scene = prepared
            .scene(id)
            .ok_or_else(|| Error::Validation(format!("no image with id {id:?}")))?;
        let trained = Trained {
            pool,
            weights: &policy.weights,
            sequence: &policy.static_sequence,
        };
        let runner = prepared.runner(&self.config, pool);
        let traj = runner.rollout(&trained.policy(method, &self.config), scene, budget, None, false);
        Ok(crate::dhm::predict_labels(traj.final_state(), &scene.tree))
    }

    /// Compares `methods` on `split` and writes the curves, and the curves
    /// as fractions of their last point, as CSV.
    pub fn eval_curves(
        &self,
        prepared: &Prepared,
        pool: &ActionPool,
        policy: &PolicyArtifact,
        methods: &[Method],
        split: Split,
        out: &Path,
    ) -> Result<Comparison> {
        let trained = Trained {
            pool,
            weights: &policy.weights,
            sequence: &policy.static_sequence,
        };
        let scenes = prepared.split(split);
        let cmp = compare(prepared, &self.config, &trained, methods, &scenes)?;
        write_csv(out, &cmp.curves)?;
        let normalized: Vec<_> = cmp.curves.iter().map(normalized_curve).collect();
        write_csv(&normalized_path(out), &normalized)?;
        Ok(cmp)
    }

    /// Every stage from trees to curves on the test split.
    pub fn run_all(&self, curves: &Path) -> Result<Comparison> {
        self.build_trees()?;
        let prepared = self.prepare()?;
        let pool = self.propose(&prepared)?;
        let policy = self.train(&prepared, &pool)?;
        self.eval_curves(&prepared, &pool, &policy, &[Method::Dnm, Method::Sm, Method::Rs], Split::Test, curves)
    }
}

/// `curves.csv` becomes `curves.normalized.csv`.
pub fn normalized_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("curves");
    out.with_file_name(format!("{stem}.normalized.csv"))
}

fn write_csv(path: &Path, curves: &[crate::eval::MetricCurve]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_curves_csv(std::io::BufWriter::new(file), curves)
}
