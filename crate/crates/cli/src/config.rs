//! Experiment configuration files (TOML).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use itfa_core::detector::DetectorConfig;
use itfa_core::evalmetrics::EvalMode;
use itfa_core::synthdata::{DatasetConfig, SceneStyle};
use itfa_core::training::{FinetuneLayers, FreezePolicy, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "ITFA_OUTPUT_ROOT";

/// Either a path to a dataset TOML file or an inline `[dataset]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetRef {
    Path(PathBuf),
    Inline(DatasetConfig),
}

impl Default for DatasetRef {
    fn default() -> Self {
        DatasetRef::Inline(DatasetConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// `joint` or `novel_only`.
    pub mode: EvalMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { mode: EvalMode::Joint }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetRef,
    pub detector: DetectorConfig,
    pub base: TrainConfig,
    pub finetune: TrainConfig,
    pub policy: FinetuneLayers,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub eval: EvalOptions,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetRef::default(),
            detector: DetectorConfig::default(),
            base: TrainConfig::base(),
            finetune: TrainConfig::finetune(),
            policy: FinetuneLayers::Fc2,
            shots: vec![1, 5, 10],
            seeds: (0..10).collect(),
            eval: EvalOptions::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a config file. A relative dataset path is resolved against
    /// the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: ExperimentConfig = toml::from_str(&text).map_err(|source| Error::Toml {
            path: path.to_path_buf(),
            source,
        })?;
        if let DatasetRef::Path(p) = &mut config.dataset {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(Error::Config(format!("shot counts {:?} must be nonempty and at least 1", self.shots)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(Error::Config(format!("seeds {:?} are not distinct", self.seeds)));
        }
        if self.eval.mode == EvalMode::BaseOnly {
            return Err(Error::Config("eval mode must be `joint` or `novel_only`".into()));
        }
        self.detector.validate()?;
        self.base.validate()?;
        self.finetune.validate()?;
        let dataset = self.dataset_config()?;
        if dataset.canvas != self.detector.canvas {
            return Err(Error::Config(format!(
                "dataset canvas {:?} differs from detector canvas {:?}",
                dataset.canvas, self.detector.canvas
            )));
        }
        let max_k = self.shots.iter().copied().max().unwrap_or(0);
        if dataset.max_shots < max_k {
            return Err(Error::Config(format!(
                "dataset max_shots {} is below the largest requested K {max_k}",
                dataset.max_shots
            )));
        }
        Ok(())
    }

    /// The dataset configuration, reading it from disk when referenced by path.
    pub fn dataset_config(&self) -> Result<DatasetConfig> {
        match &self.dataset {
            DatasetRef::Inline(c) => Ok(c.clone()),
            DatasetRef::Path(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|source| Error::Toml { path: p.clone(), source })
            }
        }
    }

    pub fn freeze_policy(&self) -> FreezePolicy {
        FreezePolicy::new(self.policy)
    }

    /// Applies the output-root override, if any.
    pub fn with_output_root(mut self, root: Option<PathBuf>) -> Self {
        if let Some(r) = root {
            self.output_dir = r;
        }
        self
    }

    /// SHA-256 over the canonical JSON of the resolved configuration.
    pub fn digest(&self) -> Result<String> {
        let mut resolved = self.clone();
        resolved.dataset = DatasetRef::Inline(self.dataset_config()?);
        resolved.output_dir = PathBuf::new();
        let json = serde_json::to_string(&resolved)?;
        Ok(hex::encode(Sha256::digest(json.as_bytes())))
    }

    /// Text attached to reports of a shifted-style test split.
    pub fn domain_note(&self) -> Result<Option<String>> {
        Ok((self.dataset_config()?.test_style == SceneStyle::Shifted).then(|| {
            "test split uses the shifted scene style; this approximates a cross-domain evaluation".to_string()
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        let text = c.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.shots, vec![1, 5, 10]);
        assert_eq!(c.seeds.len(), 10);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "exp.toml", "shots = [10]\nseeds = [3, 4]\npolicy = \"none\"\n[base]\nsteps = 20\n");
        let c = ExperimentConfig::load(&p).unwrap();
        assert_eq!(c.shots, vec![10]);
        assert_eq!(c.policy, FinetuneLayers::None);
        assert_eq!(c.base.steps, 20);
        assert_eq!(c.base.learning_rate, TrainConfig::base().learning_rate);
        assert_eq!(c.finetune, TrainConfig::finetune());
    }

    #[test]
    fn dataset_reference_resolves_relative_to_config() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("data")).unwrap();
        write(&dir.path().join("data"), "ds.toml", "test_images = 12\nseed = 9\n");
        let p = write(dir.path(), "exp.toml", "dataset = \"data/ds.toml\"\n");
        let c = ExperimentConfig::load(&p).unwrap();
        let ds = c.dataset_config().unwrap();
        assert_eq!((ds.test_images, ds.seed), (12, 9));
    }

    #[test]
    fn missing_dataset_file_fails_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "exp.toml", "dataset = \"nope.toml\"\n");
        assert!(matches!(ExperimentConfig::load(&p), Err(Error::Io { .. })));
    }

    #[test]
    fn rejects_bad_shots_and_duplicate_seeds() {
        let c = ExperimentConfig { shots: vec![0, 5], ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ExperimentConfig { seeds: vec![1, 2, 1], ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ExperimentConfig { shots: vec![20], ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "exp.toml", "shotz = [1]\n");
        assert!(matches!(ExperimentConfig::load(&p), Err(Error::Toml { .. })));
    }

    #[test]
    fn digest_ignores_output_dir_but_not_training() {
        let a = ExperimentConfig::default();
        let b = a.clone().with_output_root(Some("/elsewhere".into()));
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        let mut c = a.clone();
        c.finetune.steps += 1;
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
    }
}
