//! Experiment configuration files (TOML, strict schema).

use std::fs;
use std::path::{Path, PathBuf};

use camcon::optim::OptimizerKind;
use camcon::{AugmentPolicy, BackboneConfig, DepthPreset, InputShape, SplitConfig, TrainingConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSource {
    /// Directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    pub dir: PathBuf,
    /// Require the standard 50,000 / 10,000 record counts.
    pub exact_counts: bool,
}

impl Default for DatasetSource {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data/cifar-10-batches-bin"),
            exact_counts: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetSource,
    #[serde(default)]
    pub data: SplitConfig,
    #[serde(default)]
    pub model: BackboneConfig,
    #[serde(default)]
    pub train: TrainingConfig,
    #[serde(default)]
    pub augment: AugmentPolicy,
}

/// Preset switch from `--tiny` / `--paper-scale`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Tiny,
    Paper,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks everything that can be checked without the dataset.
    pub fn validate(&self) -> Result<(), CliError> {
        let id_ok = !self.run_id.is_empty()
            && self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            && self.run_id != "."
            && self.run_id != "..";
        if !id_ok {
            return Err(CliError::Config(format!(
                "run_id {:?} must be non-empty and use only letters, digits, '-', '_' or '.'",
                self.run_id
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        let input = self.model.input_shape;
        if self.augment.image_size != (input.height, input.width) {
            return Err(CliError::Config(format!(
                "augment.image_size {:?} must equal the model input {}x{}",
                self.augment.image_size, input.height, input.width
            )));
        }
        if !(self.data.ratio.is_finite() && self.data.ratio > 0.0) {
            return Err(CliError::Config(format!("data.ratio must be positive, got {}", self.data.ratio)));
        }
        Ok(())
    }

    pub fn apply_scale(&mut self, scale: Scale) {
        match scale {
            Scale::Tiny => {
                self.model.depth_preset = DepthPreset::Tiny;
                self.train.optimizer = OptimizerKind::Adam;
                self.train.learning_rate = 1e-3;
            }
            Scale::Paper => {
                self.model.depth_preset = DepthPreset::Resnet50Like;
                self.model.input_shape = InputShape::default();
                self.augment.image_size = (32, 32);
                self.train.optimizer = OptimizerKind::SgdMomentum;
                self.train.learning_rate = 0.1;
            }
        }
    }

    /// Uses `seed` for the split, the initialization and the training stream.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
run_id = "smoke"
output_dir = "out"

[model]
depth_preset = "tiny"
num_classes = 10
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.data, SplitConfig::default());
        assert_eq!(c.train, TrainingConfig::default());
        c.validate().unwrap();
        let again = ExperimentConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_are_named() {
        for (text, key) in [
            (format!("{MINIMAL}\n[train]\nlearning_rte = 0.1\n"), "learning_rte"),
            (format!("bogus = 1\n{MINIMAL}"), "bogus"),
            (format!("{MINIMAL}\n[augment]\nmax_rotation = 3.0\n"), "max_rotation"),
        ] {
            match ExperimentConfig::from_toml_str(&text) {
                Err(CliError::Config(m)) => assert!(m.contains(key), "{m}"),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        let mut c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        c.run_id = "../escape".into();
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
        let mut c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        c.augment.image_size = (16, 16);
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
        let mut c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        c.train.epochs = 0;
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn scale_presets() {
        let mut c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        c.apply_scale(Scale::Paper);
        assert_eq!(c.model.depth_preset, DepthPreset::Resnet50Like);
        assert_eq!(c.train.optimizer, OptimizerKind::SgdMomentum);
        assert_eq!(c.train.learning_rate, 0.1);
        c.apply_scale(Scale::Tiny);
        assert_eq!(c.train.learning_rate, 1e-3);
        let c = c.with_seed(7);
        assert_eq!((c.data.seed, c.model.seed, c.train.seed), (7, 7, 7));
    }
}
