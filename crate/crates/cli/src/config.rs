use std::path::Path;

use anyhow::Context;
use gaitmff::pipeline::{Metric, TrainConfig};
use gaitmff::synth::SynthConfig;
use serde::Deserialize;
use toml::{Table, Value};

/// Evaluation settings shared by `synth`, `eval` and `ablate`.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub metric: Metric,
    /// NM sequences per subject enrolled in the gallery.
    pub gallery_nm: usize,
    pub threads: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            metric: Metric::Euclidean,
            gallery_nm: 4,
            threads: 1,
        }
    }
}

/// Contents of a `--config` file. Model, augmentation and cycle settings
/// live in `[train.model]`, `[train.augment]` and `[train.cycle]`.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommandConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for CommandConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train: TrainConfig::desk(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    synth: SynthConfig,
    #[serde(default)]
    train: Table,
    #[serde(default)]
    eval: EvalSection,
}

/// Copies `top` over `base`, descending into tables present in both.
fn overlay(base: &mut Table, top: Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(t)) => overlay(b, t),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

impl CommandConfig {
    /// Keys missing from `[train]` keep their [`TrainConfig::desk`] values.
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let raw: RawConfig = toml::from_str(text)?;
        let mut train = Table::try_from(TrainConfig::desk())?;
        overlay(&mut train, raw.train);
        let train: TrainConfig = Value::Table(train).try_into().context("in [train]")?;
        Ok(Self {
            synth: raw.synth,
            train,
            eval: raw.eval,
        })
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }
}
