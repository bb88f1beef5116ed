//! Run configuration file: one TOML document with `corpus`, `features`,
//! `augment`, `model`, `trainer`, `decode` and `match` sections plus a
//! global seed and output directory.
//!
//! `features` and `model` accept a `preset` key; the remaining keys of the
//! section override individual fields of that preset. Unknown keys are
//! rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::datagen::CorpusConfig;
use crate::error::{Error, Result};
use crate::evaluation::{DecodeConfig, MatchConfig};
use crate::featurize::FeatureConfig;
use crate::model::ModelConfig;
use crate::training::{TrainSettings, TrainerConfig};

/// Overrides the configured output directory when set.
pub const OUTPUT_ROOT_ENV: &str = "SED_PCL_OUTPUT_ROOT";

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Root of the run directories; relative to the config file.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default, rename = "match")]
    pub matching: MatchConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: default_output_dir(),
            corpus: CorpusConfig::default(),
            features: FeatureConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            trainer: TrainerConfig::default(),
            decode: DecodeConfig::default(),
            matching: MatchConfig::default(),
        }
    }
}

/// Replaces a section that names a `preset` with the preset's fields
/// overlaid by the section's other keys.
fn expand_preset(
    root: &mut toml::Table,
    section: &str,
    preset: impl Fn(&str) -> Result<toml::Table>,
) -> Result<()> {
    let Some(value) = root.get_mut(section) else { return Ok(()) };
    let toml::Value::Table(table) = value else {
        return Err(Error::Config(format!("[{section}] must be a table")));
    };
    let Some(name) = table.remove("preset") else { return Ok(()) };
    let name = name.as_str().ok_or_else(|| Error::Config(format!("{section}.preset must be a string")))?.to_string();
    let mut base = preset(&name)?;
    base.extend(std::mem::take(table));
    *table = base;
    Ok(())
}

fn to_table<T: Serialize>(value: &T) -> Result<toml::Table> {
    toml::Table::try_from(value).map_err(|e| Error::Config(e.to_string()))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        expand_preset(&mut root, "features", |n| to_table(&FeatureConfig::preset(n)?))?;
        expand_preset(&mut root, "model", |n| to_table(&ModelConfig::preset(n)?))?;
        let cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves its relative paths against the
    /// file's directory; the output root honours [`OUTPUT_ROOT_ENV`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.corpus.output_dir = base.join(&cfg.corpus.output_dir);
        cfg.output_dir = match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root),
            _ => base.join(&cfg.output_dir),
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.features.validate()?;
        self.augment.validate()?;
        self.model.validate()?;
        self.model.check_features(&self.features)?;
        self.trainer.validate()?;
        self.decode.validate()?;
        self.matching.validate()?;
        if self.features.sample_rate != self.corpus.sample_rate {
            return Err(Error::Config(format!(
                "features.sample_rate {} differs from corpus.sample_rate {}",
                self.features.sample_rate, self.corpus.sample_rate
            )));
        }
        Ok(())
    }

    pub fn corpus_dir(&self) -> &Path {
        &self.corpus.output_dir
    }

    /// Directory name of a run: the mode label in lowercase words plus the
    /// seed, e.g. `pcl_wo_da-seed0`.
    pub fn run_name(&self) -> String {
        let label = self.trainer.trainer_mode().label().to_lowercase();
        let slug: String = label
            .replace("w/o", "wo")
            .replace("w/", "w")
            .split_whitespace()
            .collect::<Vec<_>>()
            .join("_");
        format!("{slug}-seed{}", self.seed)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.run_name())
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            model: self.model.clone(),
            features: self.features.clone(),
            augment: self.augment.clone(),
            trainer: self.trainer.clone(),
            decode: self.decode.clone(),
            matching: self.matching.clone(),
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the fully resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(path)
    }
}
