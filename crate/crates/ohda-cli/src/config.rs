//! Run configuration: one TOML file describes the whole experiment.
//!
//! Every section is optional and falls back to the documented defaults, but
//! unknown keys are rejected at every nesting level so typos fail loudly
//! instead of silently running the default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ohda_core::error::{Error, Result};
use ohda_core::scenegen::DomainSpec;
use ohda_core::trainer::TrainConfig;

/// Dataset root and split sizes used by `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> DataConfig {
        DataConfig {
            root: PathBuf::from("data"),
            train_scenes: 200,
            eval_scenes: 50,
        }
    }
}

/// Everything a run needs: training settings, the domain pair, the dataset
/// layout, and where artifacts go.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            train: TrainConfig::default(),
            source: DomainSpec::source_default(),
            target: DomainSpec::target_default(),
            data: DataConfig::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.source.validate()?;
        self.target.validate()?;
        let classes = self.train.detector.class_count;
        if self.source.class_count() != classes || self.target.class_count() != classes {
            return Err(Error::InvalidArgument(format!(
                "domain class counts ({}, {}) must both match the detector's {classes}",
                self.source.class_count(),
                self.target.class_count()
            )));
        }
        if self.data.train_scenes == 0 || self.data.eval_scenes == 0 {
            return Err(Error::InvalidArgument(
                "train_scenes and eval_scenes must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn split_dir(&self, split: &str) -> PathBuf {
        self.data.root.join(split)
    }
}

/// Load a config file, or the defaults when no path is given.
pub fn load(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p.to_path_buf(), e))?;
            toml::from_str(&text)
                .map_err(|e| Error::InvalidArgument(format!("config {}: {e}", p.display())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let cfg: RunConfig = toml::from_str("[train]\nseed = 3\n").unwrap();
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.data.train_scenes, 200);
        assert_eq!(cfg.out_dir, PathBuf::from("runs"));
    }

    #[test]
    fn unknown_keys_are_rejected_at_any_depth() {
        assert!(toml::from_str::<RunConfig>("mystery = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nmystery = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[train.detector]\nmystery = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[train.toggles]\ncla = \"yes\"\n").is_err());
    }

    #[test]
    fn class_count_mismatch_is_an_error() {
        let mut cfg = RunConfig::default();
        cfg.train.detector.class_count = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
