//! Experiment configuration: one TOML file describes the protocol, model,
//! training hyperparameters, freezing parameters and seeds of a study.
//!
//! Unknown keys are rejected. Any key can be overridden with a dotted path,
//! e.g. `train.epochs=2` or `experiment.seeds=[0, 1]`.

mod report;
mod run;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::cifar::CifarVariant;
use crate::error::{Error, Result};
use crate::freeze::{Criterion, PruneConfig, PruneRatio};
use crate::lrp::{Aggregation, ImportanceConfig, LrpRules, SeedClass};
use crate::net::{Conv2dSpec, HeadId, LayerSpec, Network};
use crate::optim::AdamConfig;
use crate::protocols::{ClassSplit, TbeConfig, TrainConfig};

pub use report::{aggregate, read_runs, report, write_aggregate, AggregateRow, Summary};
pub use run::{load_data, run_experiment, run_one, ExperimentData, RunRecord};

/// Environment variable naming the data root when the config has none.
pub const DATA_DIR_ENV: &str = "TBE_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data/mnist";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub protocol: ProtocolConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub tbe: TbeSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    Baseline,
    Tbe,
    Joint,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Baseline => "baseline",
            MethodKind::Tbe => "tbe",
            MethodKind::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodKind>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Dataset directory; falls back to `TBE_DATA_DIR`, then `data/mnist`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Plan freezing on this fraction of each task's training data instead
    /// of its test split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_fraction: Option<f64>,
    #[serde(default = "yes")]
    pub checkpoints: bool,
    /// Runs trained concurrently. Outputs do not depend on it.
    #[serde(default = "one")]
    pub workers: usize,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProtocolConfig {
    MnistSplit,
    MnistPermuted {
        n_tasks: usize,
    },
    /// Gaussian blobs, split into tasks of consecutive classes.
    Synthetic {
        classes: usize,
        classes_per_task: usize,
        train_per_class: usize,
        test_per_class: usize,
        dim: usize,
        separation: f64,
        data_seed: u64,
    },
    CifarSplit {
        variant: CifarVariant,
        train_files: Vec<PathBuf>,
        test_files: Vec<PathBuf>,
        split: ClassSplit,
    },
}

impl ProtocolConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ProtocolConfig::MnistSplit => "mnist-split",
            ProtocolConfig::MnistPermuted { .. } => "mnist-permuted",
            ProtocolConfig::Synthetic { .. } => "synthetic",
            ProtocolConfig::CifarSplit { .. } => "cifar-split",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Dense layers with ReLU on flattened input.
    Mlp { hidden: Vec<usize> },
    /// Conv + ReLU blocks, then flatten and dense + ReLU layers.
    Cnn { conv: Vec<ConvBlock>, dense: Vec<usize> },
}

impl ModelConfig {
    /// Builds the architecture for samples of `sample_shape` with one head per entry.
    pub fn build(&self, sample_shape: &[usize], heads: &[(HeadId, usize)]) -> Result<Network> {
        let flat: usize = sample_shape.iter().product();
        match self {
            ModelConfig::Mlp { hidden } => Network::mlp(flat, hidden, heads),
            ModelConfig::Cnn { conv, dense } => {
                if sample_shape.len() != 3 {
                    return Err(Error::Config(format!(
                        "a CNN needs [channels, height, width] samples, got {sample_shape:?}"
                    )));
                }
                let mut specs = Vec::new();
                let (mut c, mut h, mut w) = (sample_shape[0], sample_shape[1], sample_shape[2]);
                for b in conv {
                    let spec = Conv2dSpec {
                        in_channels: c,
                        out_channels: b.channels,
                        kernel_h: b.kernel,
                        kernel_w: b.kernel,
                        stride: b.stride,
                        padding: b.padding,
                    };
                    let g = spec
                        .geometry(h, w)
                        .ok_or_else(|| Error::Config(format!("conv block {b:?} does not fit {c}x{h}x{w}")))?;
                    specs.push(LayerSpec::Conv2d(spec));
                    specs.push(LayerSpec::Relu);
                    (c, h, w) = (b.channels, g.oh, g.ow);
                }
                specs.push(LayerSpec::Flatten);
                let mut dim = c * h * w;
                for &d in dense {
                    specs.push(LayerSpec::dense(dim, d));
                    specs.push(LayerSpec::Relu);
                    dim = d;
                }
                specs.push(LayerSpec::heads(dim, heads.iter().cloned()));
                Network::new(sample_shape, specs)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2: f64,
    pub reset_optimizer: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            l2: t.adam.l2,
            reset_optimizer: t.reset_optimizer,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                l2: self.l2,
            },
            reset_optimizer: self.reset_optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TbeSection {
    pub reference_per_class: usize,
    pub epsilon: f64,
    pub seed_class: SeedClass,
    pub aggregation: Aggregation,
    /// `accuracy-drop` or `capacity-floor`.
    pub criterion: String,
    /// Allowed accuracy drop as a fraction.
    pub threshold: f64,
    /// Free-capacity target in percent for `capacity-floor`.
    pub min_free_percent: f64,
    /// Fraction of candidate units zeroed per iteration.
    pub ratio: f64,
    /// Fixed units per iteration; overrides `ratio` when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio_units: Option<usize>,
    pub per_layer_normalize: bool,
    pub lr_frozen: f64,
    pub lr_irrelevant: f64,
}

impl Default for TbeSection {
    fn default() -> Self {
        Self {
            reference_per_class: 10,
            epsilon: crate::lrp::DEFAULT_EPSILON,
            seed_class: SeedClass::True,
            aggregation: Aggregation::Positive,
            criterion: "accuracy-drop".into(),
            threshold: 0.02,
            min_free_percent: 0.0,
            ratio: 0.01,
            ratio_units: None,
            per_layer_normalize: false,
            lr_frozen: 0.0,
            lr_irrelevant: 1.0,
        }
    }
}

impl TbeSection {
    pub fn to_config(&self) -> Result<TbeConfig> {
        let criterion = match self.criterion.as_str() {
            "accuracy-drop" => Criterion::AccuracyDrop {
                threshold: self.threshold,
            },
            "capacity-floor" => Criterion::CapacityFloor {
                min_free_percent: self.min_free_percent,
            },
            other => {
                return Err(Error::Config(format!(
                    "tbe.criterion must be `accuracy-drop` or `capacity-floor`, got `{other}`"
                )))
            }
        };
        let prune = PruneConfig {
            criterion,
            ratio: match self.ratio_units {
                Some(n) => PruneRatio::Units(n),
                None => PruneRatio::Fraction(self.ratio),
            },
            per_layer_normalize: self.per_layer_normalize,
        };
        prune.validate()?;
        Ok(TbeConfig {
            reference_per_class: self.reference_per_class,
            importance: ImportanceConfig {
                rules: LrpRules::with_epsilon(self.epsilon),
                seed: self.seed_class,
                aggregation: self.aggregation,
            },
            prune,
            lr_frozen: self.lr_frozen,
            lr_irrelevant: self.lr_irrelevant,
        })
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl ExperimentConfig {
    /// Parses `text`, applies `key.path=value` overrides, and validates.
    pub fn parse(text: &str, origin: &Path, overrides: &[String]) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        let cfg = if overrides.is_empty() {
            cfg
        } else {
            let mut table: toml::Table = toml::from_str(text).expect("already parsed");
            for o in overrides {
                apply_override(&mut table, o)?;
            }
            toml::Value::Table(table)
                .try_into()
                .map_err(|e| Error::Config(format!("after overrides {overrides:?}: {e}")))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON form, ignoring where data is read
    /// from and results are written to.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.experiment.output_dir = PathBuf::new();
        c.experiment.data_dir = None;
        c.experiment.workers = 1;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn data_dir(&self) -> PathBuf {
        self.experiment
            .data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
    }

    /// Checks every value before any data is touched.
    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        check(!e.name.is_empty(), || "experiment.name is empty".into())?;
        check(!e.seeds.is_empty(), || "experiment.seeds is empty".into())?;
        check(e.workers > 0, || "experiment.workers must be positive".into())?;
        let mut seeds = e.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        check(seeds.len() == e.seeds.len(), || "experiment.seeds has duplicates".into())?;
        check(!e.methods.is_empty(), || "experiment.methods is empty".into())?;
        let mut methods = e.methods.clone();
        methods.sort_unstable();
        methods.dedup();
        check(methods.len() == e.methods.len(), || "experiment.methods has duplicates".into())?;
        if let Some(f) = e.validation_fraction {
            check(f > 0.0 && f < 1.0, || format!("experiment.validation_fraction {f} outside (0, 1)"))?;
        }

        match &self.protocol {
            ProtocolConfig::MnistSplit => {}
            ProtocolConfig::MnistPermuted { n_tasks } => {
                check(*n_tasks >= 1, || "protocol.n_tasks must be at least 1".into())?
            }
            ProtocolConfig::Synthetic {
                classes,
                classes_per_task,
                train_per_class,
                test_per_class,
                dim,
                separation,
                ..
            } => {
                check(*classes_per_task >= 1 && classes % classes_per_task == 0, || {
                    format!("protocol.classes_per_task {classes_per_task} must divide classes {classes}")
                })?;
                check(*train_per_class >= 1 && *test_per_class >= 1 && *dim >= 1, || {
                    "synthetic sizes must be positive".into()
                })?;
                check(separation.is_finite() && *separation >= 0.0, || {
                    format!("protocol.separation {separation} must be finite and non-negative")
                })?;
            }
            ProtocolConfig::CifarSplit {
                train_files, test_files, ..
            } => check(!train_files.is_empty() && !test_files.is_empty(), || {
                "protocol.train_files and protocol.test_files must be non-empty".into()
            })?,
        }

        match &self.model {
            ModelConfig::Mlp { hidden } => check(hidden.iter().all(|&h| h > 0), || "model.hidden sizes must be positive".into())?,
            ModelConfig::Cnn { conv, dense } => check(
                conv.iter().all(|b| b.channels > 0 && b.kernel > 0 && b.stride > 0) && dense.iter().all(|&d| d > 0),
                || "model conv/dense sizes must be positive".into(),
            )?,
        }

        let t = &self.train;
        check(t.batch_size > 0, || "train.batch_size must be positive".into())?;
        check(t.lr > 0.0 && t.lr.is_finite(), || format!("train.lr {} must be positive", t.lr))?;
        check((0.0..1.0).contains(&t.beta1) && (0.0..1.0).contains(&t.beta2), || {
            "train.beta1 and train.beta2 must lie in [0, 1)".into()
        })?;
        check(t.eps > 0.0, || "train.eps must be positive".into())?;
        check(t.l2 >= 0.0 && t.l2.is_finite(), || "train.l2 must be non-negative".into())?;

        let b = &self.tbe;
        check(b.reference_per_class >= 1, || "tbe.reference_per_class must be at least 1".into())?;
        check(b.epsilon >= 0.0 && b.epsilon.is_finite(), || "tbe.epsilon must be non-negative".into())?;
        check((0.0..=1.0).contains(&b.lr_frozen) && (0.0..=1.0).contains(&b.lr_irrelevant), || {
            "tbe.lr_frozen and tbe.lr_irrelevant must lie in [0, 1]".into()
        })?;
        self.tbe.to_config()?;
        Ok(())
    }
}

/// Sets `path=value` in a TOML table; `value` is TOML, or a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key.path=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let (last, parents) = keys.split_last().expect("non-empty path");
    let mut cur = table;
    for k in parents {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{assignment}`: `{k}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
