use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use relsparse::data::ColumnSchema;
use relsparse::diagram::Format;
use relsparse::{SimConfig, SweepConfig};
use serde::{Deserialize, Serialize};

/// Everything a run needs. Loaded from TOML, overridden by flags, and
/// written back fully resolved next to the outputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSettings,
    pub io: IoConfig,
    pub data: DataConfig,
    pub simulate: SimConfig,
    pub sweep: SweepConfig,
    pub replicate: ReplicateConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    /// Worker threads; all available cores when unset.
    pub threads: Option<usize>,
    pub formats: Vec<Format>,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            threads: None,
            formats: vec![Format::Csv, Format::Svg],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Center and scale states before fitting; coefficients are then on the
    /// standardized scale.
    pub standardize: bool,
    pub schema: ColumnSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicateConfig {
    pub replicates: usize,
    pub master_seed: u64,
}

impl Default for ReplicateConfig {
    fn default() -> Self {
        Self {
            replicates: 200,
            master_seed: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing the resolved config")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.simulate.validate()?;
        self.sweep.validate()?;
        if self.replicate.replicates < 2 {
            bail!(
                "replicates must be at least 2 (got {})",
                self.replicate.replicates
            );
        }
        if self.run.threads == Some(0) {
            bail!("threads must be at least 1");
        }
        if self.run.formats.is_empty() {
            bail!("at least one output format is required");
        }
        Ok(())
    }
}
