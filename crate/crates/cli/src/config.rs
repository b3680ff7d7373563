//! Run configuration: a JSON file merged with command-line overrides and
//! written next to every run's artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use telto_core::data::{GeneratorConfig, SplitRatios, DEFAULT_T_IN, DEFAULT_T_OUT};
use telto_core::{BackboneConfig, Error, ExperimentConfig, FrameworkConfig, Result, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub t_in: usize,
    pub t_out: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            t_in: DEFAULT_T_IN,
            t_out: DEFAULT_T_OUT,
        }
    }
}

/// Shape of a generated road network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub segments: usize,
    /// Undirected links; each yields two routes.
    pub links: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { segments: 34, links: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding `topology.json`, `gct.csv` and `mobility.csv`.
    pub data: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub seed: u64,
    pub network: NetworkConfig,
    pub generator: GeneratorConfig,
    pub window: WindowConfig,
    pub split: SplitRatios,
    pub stage1: BackboneConfig,
    pub framework: FrameworkConfig,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    /// Repetitions of `compare` and `ablate`.
    pub runs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            output: None,
            seed: 0,
            network: NetworkConfig::default(),
            generator: GeneratorConfig::default(),
            window: WindowConfig::default(),
            split: SplitRatios::default(),
            stage1: BackboneConfig::default(),
            framework: FrameworkConfig::default(),
            pretrain: TrainConfig::default(),
            train: TrainConfig::default(),
            runs: ExperimentConfig::default().runs,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Training settings with the run seed applied.
    pub fn seeded(&self, t: &TrainConfig) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..t.clone()
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            runs: self.runs,
            base_seed: self.seed,
            stage1: self.stage1.clone(),
            framework: self.framework.clone(),
            pretrain: self.pretrain.clone(),
            train: self.train.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window.t_in == 0 || self.window.t_out == 0 {
            return Err(Error::Config("window lengths must be positive".into()));
        }
        self.experiment().validate()?;
        self.generator.validate()
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Config("no data directory given (--data or \"data\" in the config)".into()))
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.output
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory given (-o or \"output\" in the config)".into()))
    }

    /// Write the resolved configuration into `dir/config.json`.
    pub fn snapshot(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::Io { path, source: e })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_unknown_keys_fail() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 4, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!((partial.seed, partial.train.epochs, partial.train.patience), (4, 3, Some(20)));
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 4}"#).is_err());
    }

    #[test]
    fn defaults_follow_the_experimental_setup() {
        let c = RunConfig::default();
        assert_eq!((c.window.t_in, c.window.t_out), (8, 4));
        assert_eq!((c.split.train, c.split.test, c.split.valid), (0.7, 0.2, 0.1));
        assert_eq!((c.train.epochs, c.train.patience, c.train.learning_rate), (180, Some(20), 1e-3));
        c.validate().unwrap();
    }
}
