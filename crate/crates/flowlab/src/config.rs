//! Strict run configuration. A run is one JSON document with sections for
//! the dataset, the path, the network, training, samplers, and metrics.
//! Parsing is strict everywhere: a misspelled key fails fast with a message
//! naming it. Resolving a config fills every default in, so the resolved
//! copy written beside a run's outputs reproduces the run on its own.

use crate::datasets::{gen_phantoms, gen_toy2d, load_images, load_toy2d, Dataset, Toy2d};
use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::numerics::mix_seed;
use crate::paths::{PathKind, PathSpec};
use crate::samplers::SamplerConfig;
use crate::training::{MetricKind, TrainConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Environment variable consulted when a config leaves `output_dir` unset.
pub const OUTPUT_ROOT_ENV: &str = "FLOWLAB_OUT";

/// Version string stamped into manifests.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Domain tag separating dataset generation from other seed consumers.
const DATASET_DOMAIN: u64 = 0x55;
/// Domain tag for model parameter initialization.
pub(crate) const MODEL_INIT_DOMAIN: u64 = 0x66;

fn default_phantom_size() -> usize {
    16
}

/// Where the data comes from: a generator or files on disk. Generator seeds
/// left unset resolve to a stream derived from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Toy2d {
        variant: Toy2d,
        n: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Phantoms {
        n: usize,
        #[serde(default = "default_phantom_size")]
        size: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// A toy CSV file or an image directory written by this crate.
    Files { path: PathBuf },
}

impl DatasetConfig {
    /// Fills generator seeds from the run seed.
    fn resolved(self, run_seed: u64) -> Self {
        let derived = mix_seed(run_seed, DATASET_DOMAIN);
        match self {
            DatasetConfig::Toy2d { variant, n, seed } => DatasetConfig::Toy2d {
                variant,
                n,
                seed: Some(seed.unwrap_or(derived)),
            },
            DatasetConfig::Phantoms { n, size, seed } => DatasetConfig::Phantoms {
                n,
                size,
                seed: Some(seed.unwrap_or(derived)),
            },
            files => files,
        }
    }

    /// Builds the dataset. Call on a resolved config so generator seeds are
    /// concrete.
    pub fn materialize(&self) -> Result<Dataset> {
        match self {
            DatasetConfig::Toy2d { variant, n, seed } => {
                gen_toy2d(*variant, *n, seed.unwrap_or(0))
            }
            DatasetConfig::Phantoms { n, size, seed } => {
                gen_phantoms(*n, *size, seed.unwrap_or(0))
            }
            DatasetConfig::Files { path } => {
                if path.extension().is_some_and(|e| e == "csv") {
                    let name = path
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or("toy2d")
                        .to_string();
                    load_toy2d(path, &name)
                } else {
                    load_images(path)
                }
            }
        }
    }
}

/// One experiment, as written by a user. `train` stays a raw JSON object
/// here; [`RunConfig::resolve`] pushes it through [`TrainConfig`]'s strict
/// parser with the top-level path and seed injected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub path: PathSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: serde_json::Map<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samplers: Vec<SamplerConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub metrics: Vec<MetricKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

/// A config with every default filled in, plus the objects it describes.
#[derive(Debug)]
pub struct ResolvedRun {
    /// Fully resolved copy; serializing it reproduces the run.
    pub config: RunConfig,
    pub dataset: Dataset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ConfigFile {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::ConfigFile {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    /// Validates everything and fills every default. The returned config
    /// resolves to itself, so writing it preserves reproducibility.
    pub fn resolve(self) -> Result<ResolvedRun> {
        self.path.validate()?;

        for key in ["path", "seed"] {
            if self.train.contains_key(key) {
                return Err(Error::Config(format!(
                    "train section must not carry `{key}`; it belongs at the top level"
                )));
            }
        }
        let mut train_map = self.train.clone();
        train_map.insert("path".into(), serde_json::to_value(&self.path)?);
        train_map.insert("seed".into(), serde_json::to_value(self.seed)?);
        let train: TrainConfig = serde_json::from_value(serde_json::Value::Object(train_map))
            .map_err(|e| Error::Config(format!("train section: {e}")))?;

        let dataset_cfg = self.dataset.clone().resolved(self.seed);
        let dataset = dataset_cfg.materialize()?;

        let model = match &self.model {
            Some(m) => {
                if m.data_shape != dataset.data_shape {
                    return Err(Error::Config(format!(
                        "model data shape {:?} does not match dataset shape {:?}",
                        m.data_shape, dataset.data_shape
                    )));
                }
                m.clone()
            }
            None => {
                let mut m = ModelConfig::for_data(dataset.data_shape.clone());
                if train.conditioning.wants_class() {
                    let classes = dataset.num_classes.ok_or_else(|| {
                        Error::Config(format!(
                            "class conditioning needs a labeled dataset, `{}` has no classes",
                            dataset.name
                        ))
                    })?;
                    m = m.with_classes(classes);
                }
                if train.conditioning.wants_mask() {
                    m = m.with_mask_cond();
                }
                m
            }
        };
        model.validate()?;
        train.validate(&dataset, &model)?;

        for sc in &self.samplers {
            sc.validate()?;
            if sc.family.is_flow() != (self.path.kind == PathKind::LinearOt) {
                return Err(Error::Config(format!(
                    "sampler `{}` cannot integrate a model trained on path `{}`",
                    sc.family.name(),
                    self.path.kind.name()
                )));
            }
        }

        let output_dir = match &self.output_dir {
            Some(dir) => dir.clone(),
            None => match std::env::var_os(OUTPUT_ROOT_ENV) {
                Some(root) => PathBuf::from(root),
                None => {
                    return Err(Error::Config(format!(
                        "output_dir is unset and the {OUTPUT_ROOT_ENV} environment \
                         variable is not defined"
                    )))
                }
            },
        };

        let config = RunConfig {
            dataset: dataset_cfg,
            path: self.path,
            model: Some(model.clone()),
            train: train_section(&train)?,
            samplers: self.samplers,
            metrics: self.metrics,
            output_dir: Some(output_dir.clone()),
            seed: self.seed,
        };
        Ok(ResolvedRun {
            config,
            dataset,
            model,
            train,
            output_dir,
        })
    }
}

/// The train section of a resolved config: the full [`TrainConfig`] with the
/// top-level `path` and `seed` lifted back out.
fn train_section(train: &TrainConfig) -> Result<serde_json::Map<String, serde_json::Value>> {
    let value = serde_json::to_value(train)?;
    let serde_json::Value::Object(mut map) = value else {
        return Err(Error::Config("train config did not serialize to an object".into()));
    };
    map.remove("path");
    map.remove("seed");
    Ok(map)
}

impl ResolvedRun {
    /// Pretty JSON of the resolved config; its digest identifies the run.
    pub fn config_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.config)?)
    }

    /// Writes `resolved_config.json` under the output directory and returns
    /// the run's digest. The digest covers everything but `output_dir`, so
    /// the same experiment hashes the same wherever its outputs land.
    pub fn write_resolved(&self) -> Result<String> {
        std::fs::create_dir_all(&self.output_dir)
            .map_err(|e| Error::io(&self.output_dir, e))?;
        let text = self.config_json()?;
        let file = self.output_dir.join("resolved_config.json");
        std::fs::write(&file, text.as_bytes()).map_err(|e| Error::io(&file, e))?;

        let mut portable = self.config.clone();
        portable.output_dir = None;
        Ok(crate::digest::sha256_hex(
            serde_json::to_string_pretty(&portable)?.as_bytes(),
        ))
    }
}

/// Provenance stamp written next to every command's outputs: digests tie the
/// artifacts to the exact config, checkpoints, and code that made them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub code_version: String,
    /// Digest of the resolved config (or of the effective flag set for
    /// commands that take no config file).
    pub config_digest: String,
    /// Checkpoint file name to content digest.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub checkpoints: BTreeMap<String, String>,
    pub seed: u64,
}

impl Manifest {
    pub fn new(command: &str, config_digest: String, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            code_version: CODE_VERSION.to_string(),
            config_digest,
            checkpoints: BTreeMap::new(),
            seed,
        }
    }

    pub fn with_checkpoint(mut self, name: &str, digest: String) -> Self {
        self.checkpoints.insert(name.to_string(), digest);
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let file = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&file, text).map_err(|e| Error::io(&file, e))
    }
}
