//! `dhm`: build hierarchies, propose actions, train policies, predict at a
//! budget and emit anytime curves. Every command reads one config file and
//! works inside a directory of config-stamped artifacts.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dhm_core::artifact::Workspace;
use dhm_core::dataset::{generate_synthetic, write_dataset, write_label_png};
use dhm_core::pipeline::Method;
use dhm_core::{Error, Result, RunConfig, Split};
use serde_json::json;

#[derive(Parser)]
#[command(name = "dhm", version, about = "Anytime scene labeling with dynamic hierarchical models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Artifact directory.
    #[arg(long, short, default_value = "dhm-work")]
    work: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigCmd,
    },
    /// Synthetic data.
    Synth {
        #[command(subcommand)]
        action: SynthCmd,
    },
    /// Segmentation hierarchies.
    Hier {
        #[command(subcommand)]
        action: HierCmd,
    },
    /// The discrete action pool.
    Actions {
        #[command(subcommand)]
        action: ActionsCmd,
    },
    /// Policy learning.
    Policy {
        #[command(subcommand)]
        action: PolicyCmd,
    },
    /// Writes the label map predicted within a budget as a PNG.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Cost budget, including the initial cost; `inf` for no limit.
        #[arg(long)]
        budget: f64,
        /// Image id.
        #[arg(long)]
        image: String,
        #[arg(long, default_value = "dnm")]
        method: String,
        /// Output PNG; defaults to `<work>/predictions/<image>_<method>.png`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluation.
    Eval {
        #[command(subcommand)]
        action: EvalCmd,
    },
}

#[derive(Subcommand)]
enum ConfigCmd {
    /// Prints the default configuration as TOML.
    Default,
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Generates the configured synthetic set as PNG files under `out`.
    Gen {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum HierCmd {
    /// Builds and caches the segmentation tree of every image.
    Build {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum ActionsCmd {
    /// Runs the greedy proposal and writes the action pool.
    Propose {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum PolicyCmd {
    /// Learns the static sequence and the Q-function policy.
    Train {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Writes anytime curves of the given methods as CSV.
    Curve {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of dnm, sm, rs.
        #[arg(long, default_value = "dnm,sm,rs")]
        methods: String,
        #[arg(long, default_value = "curves.csv")]
        out: PathBuf,
        /// Image split: train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn workspace(common: &Common) -> Result<Workspace> {
    Workspace::new(&common.work, RunConfig::load(&common.config)?)
}

fn parse_split(s: &str) -> Result<Split> {
    match s.trim().to_ascii_lowercase().as_str() {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split {other:?}; expected train, val or test"))),
    }
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Config { action: ConfigCmd::Default } => {
            print!("{}", RunConfig::default().to_toml_string()?);
            Ok(serde_json::Value::Null)
        }
        Command::Synth {
            action: SynthCmd::Gen { config, out },
        } => {
            let cfg = RunConfig::load(&config)?;
            let spec = cfg
                .data
                .synthetic
                .as_ref()
                .ok_or_else(|| Error::Config("config has no synthetic section".into()))?;
            let dataset = generate_synthetic(spec, cfg.data.count)?;
            write_dataset(&dataset, &out)?;
            Ok(json!({ "images": dataset.len(), "out": out }))
        }
        Command::Hier {
            action: HierCmd::Build { common },
        } => {
            let ws = workspace(&common)?;
            let n = ws.build_trees()?;
            Ok(json!({ "trees": n, "config_hash": ws.config_hash() }))
        }
        Command::Actions {
            action: ActionsCmd::Propose { common },
        } => {
            let ws = workspace(&common)?;
            let prepared = ws.prepare()?;
            let pool = ws.propose(&prepared)?;
            Ok(json!({ "actions": pool.len(), "learners": pool.learners.len(), "pool": ws.pool_path() }))
        }
        Command::Policy {
            action: PolicyCmd::Train { common },
        } => {
            let ws = workspace(&common)?;
            let prepared = ws.prepare()?;
            let pool = ws.load_pool()?;
            let policy = ws.train(&prepared, &pool)?;
            Ok(json!({
                "val_auc": policy.val_auc,
                "iterations": policy.history.len(),
                "static_steps": policy.static_sequence.len(),
                "policy": ws.policy_path(),
            }))
        }
        Command::Predict {
            common,
            budget,
            image,
            method,
            out,
        } => {
            if budget.is_nan() {
                return Err(Error::Validation("budget must be a number".into()));
            }
            let method = Method::parse(&method)?;
            let ws = workspace(&common)?;
            let prepared = ws.prepare()?;
            let pool = ws.load_pool()?;
            let policy = ws.load_policy(&pool)?;
            let labels = ws.predict(&prepared, &pool, &policy, method, &image, budget)?;
            let scene = prepared.scene(&image).expect("prediction found the image");
            let out = out.unwrap_or_else(|| ws.root.join("predictions").join(format!("{image}_{}.png", method.tag())));
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                    path: dir.to_path_buf(),
                    source: e,
                })?;
            }
            write_label_png(&out, scene.tree.width, scene.tree.height, &labels)?;
            Ok(json!({ "out": out }))
        }
        Command::Eval {
            action: EvalCmd::Curve {
                common,
                methods,
                out,
                split,
            },
        } => {
            let methods = methods.split(',').map(Method::parse).collect::<Result<Vec<_>>>()?;
            let split = parse_split(&split)?;
            let ws = workspace(&common)?;
            let prepared = ws.prepare()?;
            let pool = ws.load_pool()?;
            let policy = ws.load_policy(&pool)?;
            let cmp = ws.eval_curves(&prepared, &pool, &policy, &methods, split, &out)?;
            let aucs: serde_json::Map<String, serde_json::Value> = methods
                .iter()
                .zip(&cmp.aucs)
                .map(|(m, a)| (m.tag().to_string(), json!(a)))
                .collect();
            Ok(json!({ "out": out, "auc": aucs }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(serde_json::Value::Null) => ExitCode::SUCCESS,
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let report = json!({ "error": { "category": e.category(), "message": e.to_string() } });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
