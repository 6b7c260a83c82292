use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rrnn_core::data::{TokenMode, UnkPolicy};
use rrnn_core::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    #[serde(default = "default_mode")]
    pub mode: TokenMode,
    /// Marker for out-of-vocabulary tokens; `"forbid"` rejects them.
    #[serde(default = "default_unk")]
    pub unk: String,
}

fn default_mode() -> TokenMode {
    TokenMode::Char
}

fn default_unk() -> String {
    rrnn_core::data::UNK.to_string()
}

impl DataSection {
    pub fn unk_policy(&self) -> UnkPolicy {
        if self.unk == "forbid" {
            UnkPolicy::Forbid
        } else {
            UnkPolicy::Token(self.unk.clone())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub metrics: PathBuf,
    pub checkpoint_dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            metrics: PathBuf::from("runs/metrics.jsonl"),
            checkpoint_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    /// Parses TOML. `dropout_p` may sit in `[model]` or `[train]`; if both
    /// give it, they must agree.
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc: toml::Table = text.parse().context("config is not valid TOML")?;
        let from_model = match doc.get_mut("model") {
            Some(toml::Value::Table(m)) => m.remove("dropout_p"),
            _ => None,
        };
        if let Some(p) = from_model {
            let train = doc
                .entry("train")
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let Some(train) = train.as_table_mut() else {
                bail!("[train] must be a table");
            };
            match train.get("dropout_p") {
                Some(q) if q != &p => bail!("model.dropout_p ({p}) and train.dropout_p ({q}) disagree"),
                _ => {
                    train.insert("dropout_p".into(), p);
                }
            }
        }
        let cfg: RunConfig = doc.try_into().context("invalid config")?;
        Ok(cfg)
    }

    /// Reads a config file. Relative data and output paths are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.data.train,
            &mut cfg.data.valid,
            &mut cfg.data.test,
            &mut cfg.output.metrics,
            &mut cfg.output.checkpoint_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().context("invalid [train] section")?;
        self.model.layer_specs().context("invalid [model] section")?;
        for (field, p) in [
            ("data.train", &self.data.train),
            ("data.valid", &self.data.valid),
            ("data.test", &self.data.test),
        ] {
            if !p.is_file() {
                bail!("{field}: no such file {}", p.display());
            }
        }
        Ok(())
    }
}
