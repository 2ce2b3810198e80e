use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use stream4d::losses::LossWeights;
use stream4d::model::ModelConfig;
use stream4d::synth::SynthConfig;
use stream4d::training::TrainConfig;

/// Everything a run needs, read from a TOML file. Every section and field is
/// optional; missing ones take the toy defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    /// Scene generator used by `gen`.
    pub data: SynthConfig,
    pub paths: Paths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Training dataset directory.
    pub dataset: PathBuf,
    /// Root of the run directories (`teacher/`, `student/`, `student_nokd/`).
    pub runs: PathBuf,
    /// Teacher checkpoint for the student; defaults to the teacher run's
    /// final checkpoint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/train"),
            runs: PathBuf::from("runs"),
            teacher: None,
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from the defaults), applies `key=value`
    /// overrides and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("[model]")?;
        self.train.validate(self.model.max_frames).context("[train]")?;
        self.loss.validate().context("[loss]")?;
        self.data.validate().context("[data]")?;
        if (self.data.height, self.data.width) != (self.model.image_height, self.model.image_width) {
            bail!(
                "[data] renders {}x{} images but [model] expects {}x{}",
                self.data.height,
                self.data.width,
                self.model.image_height,
                self.model.image_width
            );
        }
        Ok(())
    }

    pub fn teacher_checkpoint(&self) -> PathBuf {
        self.paths
            .teacher
            .clone()
            .unwrap_or_else(|| self.paths.runs.join("teacher").join("final.ckpt"))
    }
}

/// `section.key=value`, where the value is read as a TOML value and falls
/// back to a bare string.
fn apply_override(table: &mut toml::Table, text: &str) -> Result<()> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| anyhow!("override {text:?} is not key=value"))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} is malformed");
    }
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for s in sections {
        node = node
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("override {key:?}: {s} is not a section"))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nest_and_parse_values() {
        let cfg = RunConfig::load(None, &["train.epochs=3".into(), "paths.runs=out/x".into(), "loss.alpha=0.5".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.paths.runs, PathBuf::from("out/x"));
        assert_eq!(cfg.loss.alpha, 0.5);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::load(None, &["train.epoch=3".into()]).is_err());
        assert!(RunConfig::load(None, &["bogus.x=1".into()]).is_err());
        assert!(RunConfig::load(None, &["train.epochs=-1".into()]).is_err());
        assert!(RunConfig::load(None, &["train.epochs".into()]).is_err());
        assert!(RunConfig::load(None, &["model.patch_size=5".into()]).is_err());
        assert!(RunConfig::load(None, &["data.width=16".into()]).is_err());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
