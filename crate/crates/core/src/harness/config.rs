//! Harness configuration file.
//!
//! TOML with the sections `[data]`, `[model]`, `[train]`, `[dream]`,
//! `[grid]` and `[eval]`; every key is optional. `[dream]` takes the fields
//! of [`DreamConfig`] plus `class`. Unknown keys are rejected.
//!
//! ```toml
//! [data]
//! train = "data/train.tsv"
//! test = "data/test.tsv"
//! out_dir = "run"
//!
//! [model]
//! preset = "compact"
//!
//! [train]
//! epochs = 30
//!
//! [dream]
//! class = 1
//! mode = "max"
//!
//! [grid]
//! parallelism = 4
//!
//! [eval]
//! layer = "logits"
//! ```
//!
//! `SEQDREAM_OUT_DIR` overrides `data.out_dir` and `SEQDREAM_PARALLELISM`
//! overrides `grid.parallelism`.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::classifier::{LayerSelector, ResNetConfig, TrainConfig};
use crate::dataset::{Delimiter, NormScope};
use crate::dreamer::{DreamConfig, TargetMode};
use crate::error::{Error, Result};

pub const ENV_OUT_DIR: &str = "SEQDREAM_OUT_DIR";
pub const ENV_PARALLELISM: &str = "SEQDREAM_PARALLELISM";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub delimiter: Delimiter,
    /// Z-normalization applied after loading.
    pub normalize: Option<NormScope>,
    pub out_dir: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            delimiter: Delimiter::Tab,
            normalize: None,
            out_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Compact,
    Standard,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    pub blocks: Option<usize>,
    pub convs_per_block: Option<usize>,
    pub channels: Option<Vec<usize>>,
    pub kernels: Option<Vec<usize>>,
    /// Seed of the weight initialization; defaults to the training seed.
    pub init_seed: Option<u64>,
}

impl ModelSection {
    pub fn resnet(&self, num_classes: usize, length: usize) -> Result<ResNetConfig> {
        let mut cfg = match self.preset {
            Preset::Compact => ResNetConfig::compact(num_classes, length),
            Preset::Standard => ResNetConfig::standard(num_classes, length),
        };
        if let Some(b) = self.blocks {
            cfg.blocks = b;
        }
        if let Some(n) = self.convs_per_block {
            cfg.convs_per_block = n;
        }
        if let Some(c) = &self.channels {
            cfg.channels = c.clone();
        }
        if let Some(k) = &self.kernels {
            cfg.kernels = k.clone();
        }
        cfg.validate().map_err(|e| Error::Config(format!("[model]: {e}")))?;
        Ok(cfg)
    }
}

/// Value lists of the grid axes; empty lists fall back to the two-point
/// default grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub steps: Vec<usize>,
    pub lr: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub lambda_alpha: Vec<f64>,
    pub lambda_beta: Vec<f64>,
    pub lambda_sm: Vec<f64>,
    /// Seeds per configuration; defaults to the command's `--seed`.
    pub seeds: Vec<u64>,
    pub mode: Option<TargetMode>,
    pub parallelism: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            steps: Vec::new(),
            lr: Vec::new(),
            alpha: Vec::new(),
            beta: Vec::new(),
            sigma: Vec::new(),
            lambda_alpha: Vec::new(),
            lambda_beta: Vec::new(),
            lambda_sm: Vec::new(),
            seeds: Vec::new(),
            mode: None,
            parallelism: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Layer used for activation distances and the PCA projection.
    pub layer: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            layer: LayerSelector::Logits.to_string(),
        }
    }
}

impl EvalSection {
    pub fn layer(&self) -> Result<LayerSelector> {
        self.layer.parse().map_err(|e: Error| Error::Config(format!("[eval] layer: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize)]
pub struct HarnessConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    /// Target class for `dream` and `grid`.
    pub class: Option<usize>,
    pub dream: DreamConfig,
    pub grid: GridSection,
    pub eval: EvalSection,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct RawConfig {
    data: DataSection,
    model: ModelSection,
    train: TrainConfig,
    dream: toml::Table,
    grid: GridSection,
    eval: EvalSection,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl HarnessConfig {
    /// Parses and validates a configuration file's text.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut raw: RawConfig = toml::from_str(text).map_err(config_err)?;
        let class = match raw.dream.remove("class") {
            None => None,
            Some(toml::Value::Integer(c)) if c >= 0 => Some(c as usize),
            Some(v) => return Err(Error::Config(format!("[dream] class must be a non-negative integer, got {v}"))),
        };
        let dream: DreamConfig = toml::Value::Table(raw.dream)
            .try_into()
            .map_err(|e| Error::Config(format!("[dream]: {e}")))?;
        let cfg = Self {
            data: raw.data,
            model: raw.model,
            train: raw.train,
            class,
            dream,
            grid: raw.grid,
            eval: raw.eval,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| Error::Config(format!("[train]: {e}")))?;
        self.dream.validate().map_err(|e| Error::Config(format!("[dream]: {e}")))?;
        self.eval.layer()?;
        if self.grid.parallelism == 0 {
            return Err(Error::Config("[grid] parallelism must be >= 1".into()));
        }
        Ok(())
    }

    /// Applies the environment overrides, reading variables through `get`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(dir) = get(ENV_OUT_DIR).filter(|s| !s.is_empty()) {
            self.data.out_dir = PathBuf::from(dir);
        }
        if let Some(p) = get(ENV_PARALLELISM).filter(|s| !s.is_empty()) {
            self.grid.parallelism = match p.trim().parse::<usize>() {
                Ok(n) if n >= 1 => n,
                _ => return Err(Error::Config(format!("{ENV_PARALLELISM} must be a positive integer, got `{p}`"))),
            };
        }
        Ok(())
    }
}
