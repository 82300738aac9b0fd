//! Run configuration: defaults, file loading, and `--set` overrides.

use std::path::{Path, PathBuf};

use frest_core::data::DataConfig;
use frest_core::losses::Hyperparams;
use frest_core::model::ModelConfig;
use frest_core::optim::LrConfig;
use frest_core::overrides;
use frest_core::trainer::{AdaptConfig, PretrainConfig};
use frest_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    /// Patch features kept per condition for the Hausdorff distances.
    pub subsample: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig { subsample: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub grids: Vec<String>,
    pub seeds: Vec<u64>,
    /// Iterations per cell; `None` uses `adapt.total_iters`.
    pub total_iters: Option<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            grids: frest_core::analysis::GRIDS.iter().map(|g| g.to_string()).collect(),
            seeds: vec![0, 1, 2],
            total_iters: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Accepted for interface compatibility; only `cpu` exists.
    pub device: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub hp: Hyperparams,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub analyze: AnalyzeConfig,
    pub ablate: AblateConfig,
}

/// Adaptation schedule tuned for the 64×64 toy benchmark: lower base rates
/// than the full-scale defaults and half the iterations.
pub fn toy_adapt_config() -> AdaptConfig {
    AdaptConfig {
        total_iters: 1500,
        lr: LrConfig { encoder: 5e-6, strainer: 1e-4, ..LrConfig::default() },
        ..AdaptConfig::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            device: "cpu".into(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            hp: Hyperparams::default(),
            pretrain: PretrainConfig::default(),
            adapt: toy_adapt_config(),
            analyze: AnalyzeConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(Error::Config(format!("unsupported device {:?}; only \"cpu\" is available", self.device)));
        }
        if self.data.image_size != self.model.image_size || self.data.patch_size != self.model.patch_size {
            return Err(Error::Config("data and model image_size/patch_size must agree".into()));
        }
        self.data.validate()?;
        self.model.validate()?;
        self.hp.validate()?;
        self.adapt.validate()?;
        for g in &self.ablate.grids {
            frest_core::analysis::named_grid(g)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Command-line sources of configuration, applied in order: file (or
/// defaults), `--set` assignments, then the dedicated flags.
#[derive(Clone, Debug, Default)]
pub struct Sources {
    pub config: Option<PathBuf>,
    pub set: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub device: Option<String>,
}

pub fn resolve(src: &Sources) -> Result<RunConfig> {
    let base = match &src.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut assignments: Vec<(String, Value)> =
        src.set.iter().map(|a| overrides::parse_assignment(a)).collect::<Result<_>>()?;
    if let Some(s) = src.seed {
        assignments.push(("seed".into(), Value::from(s)));
    }
    if let Some(o) = &src.out {
        assignments.push(("out".into(), Value::from(o.to_string_lossy().into_owned())));
    }
    if let Some(d) = &src.device {
        assignments.push(("device".into(), Value::from(d.clone())));
    }
    let cfg = overrides::apply(&base, &assignments)?;
    cfg.validate()?;
    Ok(cfg)
}
