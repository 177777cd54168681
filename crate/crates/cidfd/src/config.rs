//! Experiment configuration: a TOML file with a strict schema (unknown keys
//! are rejected), merged with command-line overrides. The fully resolved
//! config is persisted next to every command's outputs, and all randomness
//! in a run derives from its single root seed.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

use crate::core::{TemperatureSet, TrainConfig};
use crate::error::{Error, Result};

/// Where the digit corpus behind the striped-digit construction comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// Read MNIST-layout IDX files from `mnist_dir`.
    MnistIdx,
    /// Generate a seeded stroke-rendered digit corpus into `mnist_dir`
    /// (written in the same IDX layout, so the rest of the pipeline is
    /// identical).
    SyntheticDigits,
    /// Ingest pre-existing image directories with CSV manifests.
    ImageDir,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DataSource,
    /// IDX corpus directory (`mnist-idx` reads it, `synthetic-digits`
    /// writes and then reads it).
    #[serde(default)]
    pub mnist_dir: Option<PathBuf>,
    /// Where `gen-data` writes and `train`/`eval`/`analyze` read the
    /// composed datasets (`target/` and `background/` subdirectories).
    pub data_dir: PathBuf,
    /// Proportional subsampling factor in (0, 1].
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Digit corpus size for `synthetic-digits`.
    #[serde(default = "default_synthetic_count")]
    pub synthetic_count: usize,
    /// `image-dir` source: target images + manifest.
    #[serde(default)]
    pub target_dir: Option<PathBuf>,
    #[serde(default)]
    pub target_manifest: Option<PathBuf>,
    /// `image-dir` source: background images + manifest.
    #[serde(default)]
    pub background_dir: Option<PathBuf>,
    #[serde(default)]
    pub background_manifest: Option<PathBuf>,
    /// Optional (height, width) resize applied on ingestion.
    #[serde(default)]
    pub resize: Option<(usize, usize)>,
}

fn default_scale() -> f64 {
    1.0
}

fn default_synthetic_count() -> usize {
    60_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    /// `small_conv` or `resnet18`.
    pub arch: String,
    /// Feature dimensionality d.
    #[serde(default = "default_dim")]
    pub dim: usize,
}

fn default_dim() -> usize {
    64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemperatureSection {
    pub tau_b: f64,
    pub tau_2: f64,
    pub tau_x: f64,
    pub tau_xb: f64,
}

impl Default for TemperatureSection {
    fn default() -> Self {
        Self {
            tau_b: 1.0,
            tau_2: 2.0,
            tau_x: 1.0,
            tau_xb: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs_bg: usize,
    pub epochs_tg: usize,
    pub batch_size: usize,
    pub bank_momentum: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub checkpoint_every: usize,
    pub grad_clip: f64,
    pub warmup_epochs: usize,
    pub cache_bg_features: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            epochs_bg: 30,
            epochs_tg: 60,
            batch_size: 128,
            bank_momentum: 0.5,
            learning_rate: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
            checkpoint_every: 0,
            grad_clip: 0.0,
            warmup_epochs: 0,
            cache_bg_features: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub kmeans_restarts: usize,
    /// Cluster count; defaults to the dataset's class count when absent.
    pub k: Option<usize>,
    /// Histogram bins for the similarity analysis.
    pub bins: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            kmeans_restarts: 10,
            k: None,
            bins: 50,
        }
    }
}

/// The full experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every random stream derives from it.
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub encoder: EncoderSection,
    #[serde(default)]
    pub temperatures: TemperatureSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scale: Option<f64>,
    pub out: Option<PathBuf>,
    pub cache_bg_features: Option<bool>,
}

impl ExperimentConfig {
    /// Parses and validates a TOML config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_overrides(mut self, ov: &Overrides) -> Result<Self> {
        if let Some(seed) = ov.seed {
            self.seed = seed;
        }
        if let Some(scale) = ov.scale {
            self.dataset.scale = scale;
        }
        if let Some(out) = &ov.out {
            self.output_dir = out.clone();
        }
        if let Some(cache) = ov.cache_bg_features {
            self.training.cache_bg_features = cache;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dataset.scale > 0.0 && self.dataset.scale <= 1.0) {
            return Err(Error::Config(format!(
                "dataset.scale must lie in (0, 1], got {}",
                self.dataset.scale
            )));
        }
        match self.dataset.source {
            DataSource::MnistIdx | DataSource::SyntheticDigits => {
                if self.dataset.mnist_dir.is_none() {
                    return Err(Error::Config(
                        "dataset.mnist_dir is required for idx-based sources".into(),
                    ));
                }
            }
            DataSource::ImageDir => {
                if self.dataset.target_dir.is_none() || self.dataset.background_dir.is_none() {
                    return Err(Error::Config(
                        "dataset.target_dir and dataset.background_dir are required for image-dir"
                            .into(),
                    ));
                }
            }
        }
        crate::encoder::Arch::from_tag(&self.encoder.arch)?;
        self.train_config().validate()?;
        self.temperature_set::<f64>()?;
        if self.eval.kmeans_restarts == 0 || self.eval.bins == 0 {
            return Err(Error::Config(
                "eval.kmeans_restarts and eval.bins must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The trainer-facing view of the training section.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs_bg: self.training.epochs_bg,
            epochs_tg: self.training.epochs_tg,
            batch_size: self.training.batch_size,
            dim: self.encoder.dim,
            bank_momentum: self.training.bank_momentum,
            learning_rate: self.training.learning_rate,
            momentum: self.training.momentum,
            weight_decay: self.training.weight_decay,
            seed: self.seed,
            checkpoint_every: self.training.checkpoint_every,
            grad_clip: self.training.grad_clip,
            warmup_epochs: self.training.warmup_epochs,
            cache_bg_features: self.training.cache_bg_features,
        }
    }

    pub fn temperature_set<T: crate::core::Real>(&self) -> Result<TemperatureSet<T>> {
        TemperatureSet::new(
            T::from_f64(self.temperatures.tau_b),
            T::from_f64(self.temperatures.tau_2),
            T::from_f64(self.temperatures.tau_x),
            T::from_f64(self.temperatures.tau_xb),
        )
    }

    /// Writes the resolved config (file + overrides) for provenance.
    pub fn persist_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serializing resolved config: {e}")))?;
        let path = dir.join("resolved_config.toml");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    const MINIMAL: &str = r#"
seed = 7
output_dir = "runs/x"

[dataset]
source = "synthetic-digits"
mnist_dir = "data/digits"
data_dir = "data/stripe"
scale = 0.1

[encoder]
arch = "small_conv"
dim = 64
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.training.epochs_bg, 30);
        assert_eq!(cfg.training.epochs_tg, 60);
        assert_eq!(cfg.temperatures.tau_2, 2.0);
        assert_eq!(cfg.eval.kmeans_restarts, 10);
        assert_eq!(cfg.dataset.synthetic_count, 60_000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("[encoder]", "turbo = true\n\n[encoder]");
        assert!(toml::from_str::<ExperimentConfig>(&bad).is_err());
        let bad2 = format!("{MINIMAL}\n[training]\nlerning_rate = 0.1\n");
        assert!(toml::from_str::<ExperimentConfig>(&bad2).is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.dataset.scale = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.encoder.arch = "vit".into();
        assert!(cfg.validate().is_err());
        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.temperatures.tau_x = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        let cfg = cfg
            .apply_overrides(&Overrides {
                seed: Some(99),
                scale: Some(0.5),
                out: Some(PathBuf::from("elsewhere")),
                cache_bg_features: Some(true),
            })
            .unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.dataset.scale, 0.5);
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
        assert!(cfg.training.cache_bg_features);
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempdir().unwrap();
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.persist_resolved(dir.path()).unwrap();
        let back = ExperimentConfig::load(&dir.path().join("resolved_config.toml")).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.dataset.data_dir, cfg.dataset.data_dir);
    }

    #[test]
    fn image_dir_source_requires_paths() {
        let text = MINIMAL.replace("synthetic-digits", "image-dir");
        let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
        assert!(cfg.validate().is_err());
    }
}
