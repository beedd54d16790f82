//! Run configuration: one nested TOML document with a default for every
//! field, plus `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::self_paced::SelfPacedConfig;
use crate::synth::DataConfig;
use crate::train::{PretrainConfig, SemiSupConfig};

/// Environment variable that replaces `output.root`.
pub const OUTPUT_ROOT_ENV: &str = "SPCON_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PaceReportConfig {
    pub max_epoch: usize,
    /// Original images per probe batch.
    pub batch_size: usize,
    /// Number of probe batches averaged per epoch.
    pub batches: usize,
    pub p_values: Vec<f64>,
}

impl Default for PaceReportConfig {
    fn default() -> Self {
        Self {
            max_epoch: 20,
            batch_size: 16,
            batches: 4,
            p_values: vec![0.5, 1.0, 2.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub root: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed for data generation and single runs.
    pub seed: u64,
    /// Training seeds shared by every ablation variant.
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub self_paced: SelfPacedConfig,
    pub pretrain: PretrainConfig,
    pub semisup: SemiSupConfig,
    pub pace_report: PaceReportConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: vec![0, 1, 2],
            data: DataConfig::default(),
            model: ModelConfig::default(),
            self_paced: SelfPacedConfig::default(),
            pretrain: PretrainConfig::default(),
            semisup: SemiSupConfig::default(),
            pace_report: PaceReportConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Applies `a.b.c=value` overrides in order. Values parse as TOML
    /// literals (`3`, `0.5`, `true`, `[1, 2]`, `"x"`), falling back to a bare
    /// string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::Serde(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override `{item}` is not key=value")))?;
            set_path(&mut doc, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces the output root from the environment when set.
    pub fn with_env_output_root(mut self) -> Self {
        if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()) {
            self.output.root = PathBuf::from(root);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.self_paced.validate()?;
        self.semisup.validate()?;
        self.pretrain.optimizer.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if (self.model.height, self.model.width) != (self.data.height, self.data.width) {
            return bad("model and data image extents differ".into());
        }
        if self.model.num_classes != self.data.num_classes {
            return bad("model and data class counts differ".into());
        }
        if self.self_paced.lambdas.len() != crate::synth::MetaLabelSpec::KINDS {
            return bad(format!(
                "expected {} meta-label weights, got {}",
                crate::synth::MetaLabelSpec::KINDS,
                self.self_paced.lambdas.len()
            ));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.pretrain.batch_size < 2 {
            return bad("pretrain.batch_size must be at least 2".into());
        }
        if self.pace_report.max_epoch == 0 || self.pace_report.batches == 0 || self.pace_report.batch_size < 2 {
            return bad("pace_report needs max_epoch, batches >= 1 and batch_size >= 2".into());
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(doc: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty());
    let Some(last) = last else {
        return Err(Error::InvalidConfig(format!("empty override key `{key}`")));
    };
    let mut node = doc;
    for p in parts {
        node = node
            .get_mut(p)
            .filter(|n| n.is_table())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown config section `{p}` in `{key}`")))?;
    }
    let table = node.as_table_mut().expect("checked table");
    // optional fields are absent from the serialized form; let
    // deserialization judge unknown keys
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("[data]\nslicez = 3").is_err());
        let cfg = ExperimentConfig::default();
        assert!(cfg.with_overrides(&["data.slicez=3"]).is_err());
        assert!(cfg.with_overrides(&["nope.x=3"]).is_err());
    }

    #[test]
    fn overrides_win() {
        let cfg = ExperimentConfig::from_toml_str("[data]\nslices = 10\n").unwrap();
        let cfg = cfg
            .with_overrides(&[
                "data.slices=16",
                "self_paced.regularizer=hard",
                "self_paced.gamma_start=0.5",
                "seeds=[4, 5]",
            ])
            .unwrap();
        assert_eq!(cfg.data.slices, 16);
        assert_eq!(cfg.self_paced.regularizer, crate::self_paced::Regularizer::Hard);
        assert_eq!(cfg.self_paced.gamma_start, Some(0.5));
        assert_eq!(cfg.seeds, vec![4, 5]);
    }

    #[test]
    fn inconsistent_shapes_are_rejected() {
        let cfg = ExperimentConfig::default();
        assert!(cfg.with_overrides(&["model.num_classes=2"]).is_err());
        assert!(cfg.with_overrides(&["model.num_classes=2", "data.num_classes=2"]).is_ok());
    }
}
