//! Run configuration file.
//!
//! ```toml
//! dataset = "data/manifest.toml"   # relative paths resolve against this file
//! output_dir = "runs/membranes"
//!
//! [network]   # depth, base_width, num_classes, in_channels, aspp_rates, ...
//! [train]     # lr, steps, seed, batch_size, checkpoint_every
//! [loss]      # lambda
//! [augment]   # flip_h, flip_v, rotate, max_degrees, zoom_range
//! [ablate]    # steps, train_images, test_images, size, cells, seed
//! ```

use std::path::{Path, PathBuf};

use acenet_core::graph::NetworkConfig;
use acenet_core::tensor::adam::DEFAULT_LR;
use acenet_core::training::{AblationSettings, AugmentConfig, LossWeights, TrainConfig};
use acenet_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: DEFAULT_LR,
            steps: t.steps,
            seed: t.seed,
            batch_size: t.batch_size,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub ablate: AblationSettings,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/acenet")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            output_dir: default_output_dir(),
            network: NetworkConfig::default(),
            train: TrainSection::default(),
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
            ablate: AblationSettings::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates; relative paths are joined onto `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        cfg.validate()?;
        if let Some(d) = cfg.dataset.take() {
            cfg.dataset = Some(base_dir.join(d));
        }
        cfg.output_dir = base_dir.join(&cfg.output_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        RunConfig::parse(&text, base)
    }

    /// Every section's checks, collected.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut collect = |r: Result<()>| match r {
            Ok(()) => {}
            Err(Error::Config(more)) => errs.extend(more),
            Err(e) => errs.push(e.to_string()),
        };
        collect(self.network.validate());
        collect(self.train_config().validate());
        collect(self.loss.validate());
        collect(self.ablate.validate());
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            steps: self.train.steps,
            seed: self.train.seed,
            batch_size: self.train.batch_size,
            augment: self.augment,
            checkpoint_every: self.train.checkpoint_every,
        }
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
