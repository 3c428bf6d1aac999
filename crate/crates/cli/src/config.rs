//! Run configuration: presets, flat JSON files and flag overrides.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use bactrack::appearance::AdMode;
use bactrack::evalsim::SyntheticConfig;
use bactrack::pipeline::TrackerConfig;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, CliResult, DataContext};

pub const THREADS_ENV: &str = "BACTRACK_THREADS";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Full-size model dimensions.
    #[default]
    Full,
    /// Small model that runs a long sequence in seconds.
    Desk,
}

impl Preset {
    pub fn tracker(self) -> TrackerConfig {
        match self {
            Preset::Full => TrackerConfig::default(),
            Preset::Desk => TrackerConfig::desk(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::ValueEnum)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Flag values that take precedence over the configuration file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub ad_mode: Option<AdMode>,
    pub n_templates: Option<usize>,
    pub groups: Option<usize>,
    pub heads: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut TrackerConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.ad_mode {
            cfg.ad_mode = v;
        }
        if let Some(v) = self.n_templates {
            cfg.n_templates = v;
        }
        if let Some(v) = self.groups {
            cfg.groups = v;
        }
        if let Some(v) = self.heads {
            cfg.heads = v;
        }
    }
}

/// Overlays the keys of a JSON object onto `base`; unknown keys are rejected
/// by the target type.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: serde_json::Value) -> anyhow::Result<T> {
    let serde_json::Value::Object(patch) = patch else {
        anyhow::bail!("configuration must be a JSON object");
    };
    let mut merged = serde_json::to_value(base)?;
    let obj = merged.as_object_mut().expect("config types serialise to objects");
    for (k, v) in patch {
        obj.insert(k, v);
    }
    Ok(serde_json::from_value(merged)?)
}

fn read_json(path: &Path) -> CliResult<serde_json::Value> {
    let text = fs::read_to_string(path).data_ctx(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).data_ctx(|| format!("{} is not valid JSON", path.display()))
}

/// Preset, then the file's keys, then flags. The result is validated.
pub fn tracker_config(preset: Preset, file: Option<&Path>, flags: &Overrides) -> CliResult<TrackerConfig> {
    let mut cfg = match file {
        Some(p) => overlay(&preset.tracker(), read_json(p)?).data_ctx(|| format!("invalid tracker config {}", p.display()))?,
        None => preset.tracker(),
    };
    flags.apply(&mut cfg);
    cfg.validate().map_err(CliError::usage)?;
    Ok(cfg)
}

/// The drift benchmark for `seed`, overlaid with the file's keys.
pub fn synthetic_config(file: Option<&Path>, seed: u64) -> CliResult<SyntheticConfig> {
    let base = SyntheticConfig::drift_benchmark(seed);
    let cfg = match file {
        Some(p) => overlay(&base, read_json(p)?).data_ctx(|| format!("invalid synthetic config {}", p.display()))?,
        None => base,
    };
    cfg.validate().map_err(CliError::usage)?;
    Ok(cfg)
}

pub fn parse_ad_mode(s: &str) -> Result<AdMode, String> {
    AdMode::from_str(s)
}

/// Worker pool sized by `BACTRACK_THREADS` when set.
pub fn worker_pool() -> CliResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::usage(anyhow::anyhow!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(CliError::usage)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_keys_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"n_templates": 2, "seed": 9, "tau_si": 0.5}"#).unwrap();
        let flags = Overrides { seed: Some(4), ..Default::default() };
        let cfg = tracker_config(Preset::Desk, Some(&p), &flags).unwrap();
        assert_eq!((cfg.n_templates, cfg.seed, cfg.tau_si), (2, 4, 0.5));
        assert_eq!(cfg.channels, TrackerConfig::desk().channels);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_grouping() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"n_template": 2}"#).unwrap();
        assert_eq!(tracker_config(Preset::Full, Some(&p), &Overrides::default()).unwrap_err().code, 2);
        let flags = Overrides { groups: Some(3), ..Default::default() };
        assert_eq!(tracker_config(Preset::Full, None, &flags).unwrap_err().code, 1);
        let missing = dir.path().join("absent.json");
        let err = tracker_config(Preset::Full, Some(&missing), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("absent.json"));
    }

    #[test]
    fn defaults_are_the_full_size_values() {
        let cfg = tracker_config(Preset::Full, None, &Overrides::default()).unwrap();
        assert_eq!((cfg.n_templates, cfg.groups, cfg.heads, cfg.channels), (3, 4, 8, 256));
        assert_eq!((cfg.tau0, cfg.w1, cfg.w2, cfg.tau_si, cfg.window_weight), (1.8, 0.95, 0.9, 0.42, 0.49));
    }
}
