//! JSON run configuration: a preset plus strict overrides, resolved before any compute.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::simulator::SimSpec;
use crate::trainer::{Preset, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub stack: PathBuf,
    pub metadata: PathBuf,
    pub phantom: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            stack: "particles.mrcs".into(),
            metadata: "particles.csv".into(),
            phantom: "phantom.mrc".into(),
            output_dir: "out".into(),
        }
    }
}

/// Configuration as written by the user; every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRunConfig {
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub simulation: Option<Map<String, Value>>,
    #[serde(default)]
    pub training: Option<Map<String, Value>>,
    #[serde(default)]
    pub paths: Option<PathsConfig>,
}

/// Fully resolved configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub simulation: SimSpec,
    pub training: TrainConfig,
    pub paths: PathsConfig,
}

/// Simulation defaults that go with each preset.
pub fn preset_simulation(preset: Preset) -> SimSpec {
    match preset {
        Preset::Desk => SimSpec::new(3000, 48, 0),
        Preset::Synthetic => SimSpec::new(20000, 64, 0),
        Preset::RealStyle => SimSpec { centered: false, ..SimSpec::new(20000, 64, 0) },
    }
}

fn overlay<T: Serialize + for<'de> Deserialize<'de>>(base: &T, over: Option<&Map<String, Value>>, section: &str) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    if let (Some(over), Value::Object(obj)) = (over, &mut v) {
        for (k, val) in over {
            obj.insert(k.clone(), val.clone());
        }
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("{section}: {e}")))
}

impl RawRunConfig {
    /// Applies overrides on top of the preset (the CLI preset wins over the file's).
    pub fn resolve(&self, preset_override: Option<Preset>) -> Result<RunConfig> {
        let preset = preset_override.or(self.preset).unwrap_or(Preset::Desk);
        let simulation: SimSpec = overlay(&preset_simulation(preset), self.simulation.as_ref(), "simulation")?;
        let training: TrainConfig = overlay(&TrainConfig::preset(preset), self.training.as_ref(), "training")?;
        let cfg = RunConfig { preset, simulation, training, paths: self.paths.clone().unwrap_or_default() };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.simulation.validate()?;
        self.training.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Paths are taken relative to `base` unless absolute.
    pub fn rebase(mut self, base: &Path) -> RunConfig {
        for p in [&mut self.paths.stack, &mut self.paths.metadata, &mut self.paths.phantom, &mut self.paths.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self
    }
}

pub fn parse_config(text: &str) -> Result<RawRunConfig> {
    serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn read_config(path: &Path) -> Result<RawRunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        assert!(parse_config(r#"{"bogus": 1}"#).is_err());
        let raw = parse_config(r#"{"training": {"heads": 3, "lr_encodr": 0.1}}"#).unwrap();
        assert!(matches!(raw.resolve(None), Err(Error::Config(_))));
        let raw = parse_config(r#"{"simulation": {"snr": 0.5, "noise": 1}}"#).unwrap();
        assert!(raw.resolve(None).is_err());
        assert!(parse_config(r#"{"paths": {"stack": "a", "extra": "b"}}"#).is_err());
        assert!(parse_config(r#"{"preset": "laptop"}"#).is_err());
    }

    #[test]
    fn overrides_and_presets() {
        let raw = parse_config(r#"{"preset": "synthetic", "training": {"heads": 3}, "simulation": {"n_images": 10}}"#).unwrap();
        let cfg = raw.resolve(None).unwrap();
        assert_eq!(cfg.training.heads, 3);
        assert_eq!(cfg.training.switch_epoch, 7);
        assert_eq!(cfg.simulation.n_images, 10);
        let desk = raw.resolve(Some(Preset::Desk)).unwrap();
        assert_eq!(desk.training.switch_epoch, 12);
        assert_eq!(desk.simulation.l, 48);
        assert!(parse_config(r#"{"training": {"switch_epoch": 50}}"#).unwrap().resolve(None).is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = RawRunConfig::default().resolve(None).unwrap();
        let b = RawRunConfig::default().resolve(None).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
        let c = parse_config(r#"{"training": {"seed": 1}}"#).unwrap().resolve(None).unwrap();
        assert_ne!(a.digest(), c.digest());
        let text = serde_json::to_string(&a).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.digest(), a.digest());
    }
}
