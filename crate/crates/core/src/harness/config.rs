//! Run configuration, read from TOML with `[model]`, `[train]` and `[data]`
//! tables. Every field except `train.seed` has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::PreprocessConfig;
use crate::error::{Error, Result};
use crate::tensor::Precision;
use crate::transformer::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Linear warmup then cosine decay to zero at the last step.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Data order and augmentation seed; required.
    pub seed: u64,
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub warmup_steps: usize,
    /// Global gradient-norm clip; absent disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Weight of the L1 box term against cross-entropy.
    #[serde(default = "defaults::box_weight")]
    pub box_loss_weight: f64,
    /// Evaluate on the test split every this many steps; 0 evaluates only
    /// at the end.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub augment: PreprocessConfig,
}

mod defaults {
    pub fn steps() -> usize {
        2000
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn lr() -> f64 {
        3e-4
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn box_weight() -> f64 {
        1.0
    }
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        toml::from_str(&format!("seed = {seed}")).expect("defaults parse")
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = self.warmup_steps;
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = self.steps.saturating_sub(warm).max(1) as f64;
                let t = (step - warm) as f64 / span;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Load a saved dataset directory instead of generating one.
    pub dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
    pub difficulty: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            n_train: 500,
            n_test: 100,
            size: 32,
            difficulty: 0.3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        let mut cfg = RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::with_seed(seed),
            data: DataConfig::default(),
        };
        cfg.reseed(seed);
        cfg
    }

    /// Sets both the training seed and the parameter-init seed.
    pub fn reseed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.model.init_seed = seed;
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.augment.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || !(t.lr > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::Config("batch_size, lr, beta1 and beta2 out of range".into()));
        }
        if t.grad_clip.is_some_and(|c| c <= 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.data.dir.is_none() && self.data.size != self.model.image_size {
            return Err(Error::Config(format!(
                "data.size {} differs from model.image_size {}",
                self.data.size, self.model.image_size
            )));
        }
        if self.model.in_channels != 3 {
            return Err(Error::Config("the image pipeline produces 3 channels".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_required() {
        assert!(matches!(RunConfig::from_toml("[train]\nsteps = 3\n"), Err(Error::Config(_))));
        let cfg = RunConfig::from_toml("[train]\nseed = 4\n").unwrap();
        assert_eq!(cfg.train.seed, 4);
        assert_eq!(cfg.train.lr, 3e-4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nseed = 1\nlearning_rate = 2\n").is_err());
        assert!(RunConfig::from_toml("[train]\nseed = 1\n[model]\nwidth = 2\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::with_seed(9);
        cfg.model.cat.num_concepts = Some(8);
        cfg.train.grad_clip = Some(1.0);
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn schedule_shapes() {
        let mut t = TrainConfig::with_seed(0);
        t.steps = 100;
        t.warmup_steps = 10;
        t.schedule = Schedule::Cosine;
        assert!((t.lr_at(0) - t.lr / 10.0).abs() < 1e-15);
        assert!((t.lr_at(10) - t.lr).abs() < 1e-15);
        assert!(t.lr_at(99) < t.lr * 0.01);
    }
}
