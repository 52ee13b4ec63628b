//! Layered run configuration: defaults, then a TOML file, then `--set` overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use omni_core::audio::AudioConfig;
use omni_core::fusion::FusionConfig;
use omni_core::train::{CompareConfig, ModelConfig, RunSettings};
use omni_core::vision::VisionConfig;
use omni_forge::PipelineConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Global scale applied to full-size dataset counts.
    pub shrink: f64,
    /// Observation noise of the synthetic tasks.
    pub noise: f32,
    pub steps: usize,
    pub lr_scale: f64,
    pub batch_divisor: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let r = RunSettings::default();
        Self {
            shrink: omni_core::train::plan::DEFAULT_SHRINK,
            noise: 0.1,
            steps: r.steps,
            lr_scale: r.lr_scale,
            batch_divisor: r.batch_divisor,
        }
    }
}

impl TrainSection {
    pub fn settings(&self) -> RunSettings {
        RunSettings { steps: self.steps, lr_scale: self.lr_scale, batch_divisor: self.batch_divisor }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub vision: VisionConfig,
    pub audio: AudioConfig,
    pub fusion: FusionConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub compare: CompareConfig,
    pub forge: PipelineConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let cfg: RunConfig =
                    toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                toml::Value::try_from(cfg)?
            }
            None => toml::Value::try_from(RunConfig::default())?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = value.try_into().context("applying --set overrides")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.audio.validate()?;
        self.model.validate()?;
        self.compare.model.validate()?;
        self.train.settings().validate()?;
        if self.vision.patch == 0 || self.vision.dim == 0 {
            bail!("vision.patch and vision.dim must be positive");
        }
        if !(self.train.shrink > 0.0 && self.train.shrink <= 1.0) {
            bail!("train.shrink must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML literal and falls back
/// to a bare string. Unknown keys are rejected.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').with_context(|| format!("--set expects key=value, got '{spec}'"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().with_context(|| format!("'{}' is not a table", parts[..i].join(".")))?;
        node = table.get_mut(*part).with_context(|| format!("unknown config key '{}'", key.trim()))?;
    }
    let raw = raw.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    *node = match (&*node, parsed) {
        (toml::Value::Float(_), toml::Value::Integer(n)) => toml::Value::Float(n as f64),
        (toml::Value::String(_), v) if !v.is_str() => toml::Value::String(raw.to_string()),
        (_, v) => v,
    };
    Ok(())
}
