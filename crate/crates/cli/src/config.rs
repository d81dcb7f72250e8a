//! Run configuration: TOML with one section per module.
//!
//! Precedence is flag > file > preset default. Files are checked on their own first so unknown
//! keys are reported with their position; flags are applied as `section.key = value`
//! overrides on the merged table.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use cmcrl_core::augment::AugmentSpec;
use cmcrl_core::cluster::ClusterConfig;
use cmcrl_core::data::SplitSpec;
use cmcrl_core::loss::LossConfig;
use cmcrl_core::metrics::F1Mode;
use cmcrl_core::model::EncoderConfig;
use cmcrl_core::train::{MemoryConfig, PretrainConfig, TrainConfig};

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Folder-per-class corpus root.
    pub corpus: Option<PathBuf>,
    /// Images are resized to `image_size x image_size`.
    pub image_size: usize,
    pub pretrain_fraction: f64,
    pub finetune_fraction: f64,
    pub test_fraction: f64,
    /// Seed of the stratified split.
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SplitSpec::default();
        Self {
            corpus: None,
            image_size: 256,
            pretrain_fraction: s.pretrain_fraction,
            finetune_fraction: s.finetune_fraction,
            test_fraction: s.test_fraction,
            seed: s.seed,
        }
    }
}

impl DataSection {
    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            pretrain_fraction: self.pretrain_fraction,
            finetune_fraction: self.finetune_fraction,
            test_fraction: self.test_fraction,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Relative `--out` directories are placed under this root.
    pub root: Option<PathBuf>,
    pub f1_mode: F1Mode,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub data: DataSection,
    pub augment: AugmentSpec,
    pub model: EncoderConfig,
    pub cluster: ClusterConfig,
    pub memory: MemoryConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Full-size settings.
    Default,
    /// 32x32 synthetic corpora: 5 epochs of 50 iterations, a small encoder, half the corpus
    /// for pretraining and a quarter each for fine-tuning and test.
    Desk,
}

impl ConfigFile {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Default => Self::default(),
            Preset::Desk => Self::from_pretrain(
                PretrainConfig::desk(),
                DataSection {
                    image_size: 32,
                    pretrain_fraction: 0.5,
                    finetune_fraction: 0.25,
                    test_fraction: 0.25,
                    ..Default::default()
                },
            ),
        }
    }

    fn from_pretrain(p: PretrainConfig, data: DataSection) -> Self {
        Self {
            data,
            augment: p.augment,
            model: p.model,
            cluster: p.cluster,
            memory: p.memory,
            loss: p.loss,
            train: p.train,
            output: OutputSection::default(),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            train: self.train.clone(),
            model: self.model.clone(),
            cluster: self.cluster.clone(),
            augment: self.augment.clone(),
            loss: self.loss.clone(),
            memory: self.memory.clone(),
        }
    }

    /// Builds the effective configuration.
    pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut table = Value::try_from(Self::preset(preset))
            .context("cannot serialize the preset")?
            .as_table()
            .cloned()
            .ok_or_else(|| anyhow!("preset is not a table"))?;
        if let Some(path) = file {
            if !path.is_file() {
                return Err(cmcrl_core::Error::NotFound(path.to_path_buf()).into());
            }
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<ConfigFile>(&text)
                .map_err(|e| anyhow!("{}: {}", path.display(), e.to_string().trim()))?;
            let parsed: Table = text.parse().map_err(|e: toml::de::Error| anyhow!("{}: {e}", path.display()))?;
            merge(&mut table, parsed);
        }
        for (key, value) in overrides {
            set_path(&mut table, key, value.clone())?;
        }
        let cfg: ConfigFile = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| anyhow!("{}", e.to_string().trim()))?;
        cfg.pretrain_config().validate()?;
        cfg.data.split_spec().validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("cannot serialize the effective configuration")
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| anyhow!("empty key in override '{key}'"))?;
    let mut t = table;
    for p in parts {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("'{p}' in override '{key}' is not a section"))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// Parses `section.key=value`. The value is read as TOML when possible and as a bare string
/// otherwise, so `train.epochs=3` and `model.layers=4` both work.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let Some((key, raw)) = s.split_once('=') else {
        bail!("override '{s}' is not of the form section.key=value");
    };
    let (key, raw) = (key.trim(), raw.trim());
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        for preset in [Preset::Default, Preset::Desk] {
            let cfg = ConfigFile::preset(preset);
            let back: ConfigFile = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train]\nepochs = 7\niterations = 9\n").unwrap();
        let over = vec![parse_override("train.epochs=3").unwrap()];
        let cfg = ConfigFile::resolve(Preset::Default, Some(&path), &over).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.iterations, 9);
        assert_eq!(cfg.train.batch_size, 16);
    }

    #[test]
    fn unknown_keys_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[cluster]\nepsilon = 0.5\n").unwrap();
        let err = ConfigFile::resolve(Preset::Default, Some(&path), &[]).unwrap_err();
        assert!(err.to_string().contains("epsilon"), "{err}");
        let over = vec![parse_override("train.speed=2").unwrap()];
        let err = ConfigFile::resolve(Preset::Default, None, &over).unwrap_err();
        assert!(err.to_string().contains("speed"), "{err}");
    }

    #[test]
    fn override_values() {
        assert_eq!(parse_override("a.b=3").unwrap().1, Value::Integer(3));
        assert_eq!(parse_override("a.b = 0.5").unwrap().1, Value::Float(0.5));
        assert_eq!(parse_override("model.layers=1,2,4").unwrap().1, Value::String("1,2,4".into()));
        assert!(parse_override("novalue").is_err());
    }
}
