//! Experiment configuration: a TOML file, `section.key=value` overrides and
//! the `XPMO_SEED` environment variable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::DatasetSpec;
use super::stream::StreamSpec;
use crate::adaptation::AdaptConfig;
use crate::backbone::{Jitter, ToyViTConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::sodd::SoddConfig;
use crate::spectral::SpectralConfig;

pub const SEED_ENV: &str = "XPMO_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Dual-branch expandable experts with spectral routing.
    #[default]
    Expamoe,
    /// Frozen source model, no adaptation.
    Source,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_per_class: usize,
    pub validation_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_per_class: 200,
            validation_per_class: 25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub enabled: bool,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub jitter: Jitter,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            enabled: true,
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            jitter: Jitter {
                brightness: 0.2,
                contrast_min: 0.4,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmupConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            lr: 1e-3,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Artifact directory; nothing is written when absent.
    pub dir: Option<PathBuf>,
    /// Pretrained or warmed-up model to start from.
    pub checkpoint_in: Option<PathBuf>,
}

/// Everything one experiment needs. Component seeds are derived from the
/// top-level `seed` by [`ExperimentConfig::resolved`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    pub model: ToyViTConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub warmup: WarmupConfig,
    pub spectral: SpectralConfig,
    pub sodd: SoddConfig,
    pub adapt: AdaptConfig,
    pub stream: StreamSpec,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: Method::default(),
            model: ToyViTConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            warmup: WarmupConfig::default(),
            spectral: SpectralConfig {
                log_compress: true,
                ..SpectralConfig::default()
            },
            sodd: SoddConfig {
                tau_multiplier: 1.5,
                ..SoddConfig::default()
            },
            adapt: AdaptConfig::default(),
            stream: StreamSpec::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Copy with every component seed derived from `seed` and shared sizes
    /// propagated from the model section.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = c.seed;
        c.model.seed = s;
        c.adapt.seed = s.wrapping_add(3);
        c.stream.seed = s.wrapping_add(4);
        c.stream.base.seed = s.wrapping_add(5);
        c.stream.base.classes = c.model.classes;
        c.stream.base.image_size = c.model.image_size;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stream.validate()?;
        if self.stream.batch_size != self.adapt.batch_size {
            return Err(Error::Config(format!(
                "stream.batch_size {} differs from adapt.batch_size {}",
                self.stream.batch_size, self.adapt.batch_size
            )));
        }
        self.adapt.ablation.branch_mode()?;
        if self.spectral.crop_radius * 2 + 1 > self.model.image_size {
            return Err(Error::Config(format!(
                "crop radius {} too large for {}-pixel images",
                self.spectral.crop_radius, self.model.image_size
            )));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.pretrain.epochs,
            lr: self.pretrain.lr,
            batch_size: self.pretrain.batch_size,
            seed: self.seed.wrapping_add(1),
            jitter: self.pretrain.jitter,
        }
    }

    pub fn warmup_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.warmup.epochs,
            lr: self.warmup.lr,
            batch_size: self.warmup.batch_size,
            seed: self.seed.wrapping_add(2),
            jitter: Jitter::default(),
        }
    }

    pub fn train_spec(&self) -> DatasetSpec {
        DatasetSpec {
            classes: self.model.classes,
            samples_per_class: self.data.train_per_class,
            image_size: self.model.image_size,
            seed: self.seed.wrapping_add(10),
        }
    }

    pub fn validation_spec(&self) -> DatasetSpec {
        DatasetSpec {
            samples_per_class: self.data.validation_per_class,
            seed: self.seed.wrapping_add(11),
            ..self.train_spec()
        }
    }

    /// Parses TOML text, applies overrides, and resolves seeds. Keys the
    /// text leaves out keep the values of [`ExperimentConfig::default`].
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        // Parsing the text alone first gives errors with the file's line numbers.
        toml::from_str::<ExperimentConfig>(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut merged = toml::Table::try_from(ExperimentConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, table);
        let cfg: ExperimentConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("after overrides: {e}")))?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; `XPMO_SEED` replaces the seed when set.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut all = overrides.to_vec();
        if let Ok(seed) = std::env::var(SEED_ENV) {
            all.push(format!("seed={seed}"));
        }
        Self::from_toml_str(&text, &all).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Recursively overlays `top` on `base`; non-table values replace.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML value
/// and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one item");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}`: `{k}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
