//! Run configuration: one TOML document per run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::Architecture;
use crate::error::{Error, Result};
use crate::molgraph::{AtomVocabulary, DatasetManifest, VocabularySpec};
use crate::ppo::PpoConfig;
use crate::pretrain::PretrainConfig;
use crate::reward::RewardConfig;
use crate::schedule::{NoiseSchedule, DEFAULT_CLAMP};
use crate::uncertainty::{
    ObjectiveSpec, PropertyOracle, SyntheticOracle, SyntheticProperty, TableOracle,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Root of every random stream.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    /// Objectives with their cutoff floors. Empty means the oracle's own list.
    #[serde(default)]
    pub objectives: Vec<ObjectiveSpec>,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub sample: SampleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of XYZ files with a `manifest.json`, or one XYZ file.
    pub path: PathBuf,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    /// Dataset properties fed to the model as its condition vector.
    #[serde(default)]
    pub condition_properties: Vec<String>,
    /// Overrides the dataset manifest's vocabulary.
    #[serde(default)]
    pub vocabulary: Option<VocabularySpec>,
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub clamp: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            clamp: DEFAULT_CLAMP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OracleConfig {
    Synthetic {
        #[serde(default)]
        properties: Option<Vec<SyntheticProperty>>,
    },
    /// Predictions keyed by canonical graph hash.
    Table { path: PathBuf },
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig::Synthetic { properties: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub n: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { n: 100 }
    }
}

/// Splits `a.b.c=value` into its key path and TOML value. Bare words that
/// do not parse as TOML are taken as strings.
fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override {spec:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed above"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((path, value))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("override path crosses non-table key {p:?}")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides, and validates.
    /// Relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for spec in overrides {
            let (path, value) = parse_override(spec)?;
            set_path(&mut table, &path, value)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.data.path);
        if let OracleConfig::Table { path } = &mut self.oracle {
            fix(path);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.pretrain.validate()?;
        self.ppo.validate()?;
        self.reward.validate()?;
        self.architecture(1)?.validate()?;
        NoiseSchedule::new(self.schedule.steps, self.schedule.clamp)?;
        if self.sample.n == 0 {
            return Err(Error::Config("sample.n must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join("resolved_config.toml");
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule.steps, self.schedule.clamp)
    }

    pub fn architecture(&self, vocab_size: usize) -> Result<Architecture> {
        Ok(Architecture {
            vocab_size,
            condition_dim: self.data.condition_properties.len(),
            hidden: self.model.hidden,
            layers: self.model.layers,
            steps: self.schedule.steps,
            clamp: self.schedule.clamp,
        })
    }

    pub fn vocabulary(&self) -> Result<AtomVocabulary> {
        if let Some(spec) = &self.data.vocabulary {
            return spec.clone().try_into();
        }
        let dir = if self.data.path.is_dir() {
            self.data.path.clone()
        } else {
            self.data
                .path
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_default()
        };
        if dir.join(crate::molgraph::xyz::MANIFEST_FILE).exists() {
            DatasetManifest::read(&dir)?.vocabulary()
        } else {
            Ok(AtomVocabulary::qm9())
        }
    }

    pub fn oracle(&self, vocab: &AtomVocabulary) -> Result<Box<dyn PropertyOracle>> {
        Ok(match &self.oracle {
            OracleConfig::Synthetic { properties } => Box::new(SyntheticOracle::new(
                vocab.clone(),
                properties
                    .clone()
                    .unwrap_or_else(SyntheticOracle::default_properties),
            )?),
            OracleConfig::Table { path } => Box::new(TableOracle::read(vocab.clone(), path)?),
        })
    }

    /// Objectives in force: the configured list, or the synthetic oracle's own.
    pub fn objectives(&self) -> Result<Vec<ObjectiveSpec>> {
        if !self.objectives.is_empty() {
            return Ok(self.objectives.clone());
        }
        match &self.oracle {
            OracleConfig::Synthetic { properties } => Ok(properties
                .clone()
                .unwrap_or_else(SyntheticOracle::default_properties)
                .into_iter()
                .map(|p| ObjectiveSpec {
                    name: p.name,
                    direction: p.direction,
                    cutoff: p.cutoff,
                })
                .collect()),
            OracleConfig::Table { .. } => Err(Error::Config(
                "a table oracle needs an explicit [[objectives]] list".into(),
            )),
        }
    }
}
