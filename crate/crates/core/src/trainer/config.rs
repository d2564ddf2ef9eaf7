use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DiscriminatorConfig, ModelConfig};

/// Marker for "never enable the adversarial term".
pub const NEVER: i64 = -1;

/// One training stage at a fixed patch size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub patch_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr_main")]
    pub lr_main: f64,
    #[serde(default = "default_lr_disc")]
    pub lr_disc: f64,
    #[serde(default = "default_decay")]
    pub lr_decay_factor: f64,
    /// Halve the learning rates at every positive multiple of this epoch
    /// index; 0 disables decay.
    #[serde(default)]
    pub decay_every_epochs: usize,
    /// 0-based epoch index from which the adversarial term is used; -1 never.
    #[serde(default = "never")]
    pub adversarial_from_epoch: i64,
    /// Optional cap on optimizer steps within this stage.
    #[serde(default)]
    pub max_steps: Option<u64>,
}

fn default_lr_main() -> f64 {
    1e-4
}
fn default_lr_disc() -> f64 {
    1e-5
}
fn default_decay() -> f64 {
    0.5
}
fn never() -> i64 {
    NEVER
}

impl StageConfig {
    pub fn new(patch_size: usize, epochs: usize, batch_size: usize) -> Self {
        Self {
            patch_size,
            epochs,
            batch_size,
            lr_main: default_lr_main(),
            lr_disc: default_lr_disc(),
            lr_decay_factor: default_decay(),
            decay_every_epochs: 0,
            adversarial_from_epoch: NEVER,
            max_steps: None,
        }
    }

    /// The three stages of the full-scale schedule.
    pub fn paper_schedule() -> Vec<Self> {
        vec![
            Self {
                decay_every_epochs: 20,
                ..Self::new(128, 40, 32)
            },
            Self {
                decay_every_epochs: 10,
                adversarial_from_epoch: 15,
                ..Self::new(256, 30, 8)
            },
            Self {
                decay_every_epochs: 5,
                adversarial_from_epoch: 0,
                ..Self::new(512, 20, 4)
            },
        ]
    }

    pub fn is_adversarial(&self, epoch: usize) -> bool {
        self.adversarial_from_epoch >= 0 && epoch as i64 >= self.adversarial_from_epoch
    }

    pub fn validate(&self, index: usize, n: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("stage {index}: {m}")));
        let unit = 1usize << (n - 1);
        if self.patch_size == 0 || self.patch_size % unit != 0 {
            return bad(format!(
                "patch_size {} is not a positive multiple of {unit} (2^(n-1) for n = {n})",
                self.patch_size
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        for (name, v) in [("lr_main", self.lr_main), ("lr_disc", self.lr_disc)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!("lr_decay_factor {} outside (0, 1]", self.lr_decay_factor));
        }
        if self.adversarial_from_epoch < NEVER {
            return bad(format!("adversarial_from_epoch {} < -1", self.adversarial_from_epoch));
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive when set".into());
        }
        Ok(())
    }
}

/// Current learning rates of both optimizers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub main: f64,
    pub disc: f64,
}

impl LearningRates {
    pub fn initial(stage: &StageConfig) -> Self {
        Self {
            main: stage.lr_main,
            disc: stage.lr_disc,
        }
    }

    /// Rates in effect during `epoch` of `stage`.
    pub fn at_epoch(stage: &StageConfig, epoch: usize) -> Self {
        let mut lr = Self::initial(stage);
        for e in 0..=epoch {
            decay_lr(&mut lr, e, stage);
        }
        lr
    }
}

/// Applies the stage's decay if `epoch` is a decay boundary. Returns whether
/// the rates changed.
pub fn decay_lr(lr: &mut LearningRates, epoch: usize, stage: &StageConfig) -> bool {
    let k = stage.decay_every_epochs;
    if k == 0 || epoch == 0 || epoch % k != 0 {
        return false;
    }
    lr.main *= stage.lr_decay_factor;
    lr.disc *= stage.lr_decay_factor;
    true
}

/// Everything that determines a training run apart from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub discriminator: DiscriminatorConfig,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub seed: u64,
    /// Include the per-level pyramid term in the generator objective.
    #[serde(default = "yes")]
    pub pyramid_loss: bool,
    /// Multiplier on the adversarial generator term.
    #[serde(default = "one")]
    pub adv_multiplier: f64,
}

fn yes() -> bool {
    true
}
fn one() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn new(model: ModelConfig, discriminator: DiscriminatorConfig, stages: Vec<StageConfig>, seed: u64) -> Self {
        Self {
            model,
            discriminator,
            stages,
            seed,
            pyramid_loss: true,
            adv_multiplier: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.discriminator.validate()?;
        if self.stages.is_empty() {
            return Err(Error::Config("training needs at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate(i, self.model.n)?;
        }
        if !(self.adv_multiplier.is_finite() && self.adv_multiplier >= 0.0) {
            return Err(Error::Config(format!("adv_multiplier {} must be >= 0", self.adv_multiplier)));
        }
        Ok(())
    }
}

/// A model or discriminator given either by preset name or in full.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Preset<T> {
    Name(String),
    Full(T),
}

/// On-disk description of a training run (`train --config run.json`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRun {
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    pub model: Preset<ModelConfig>,
    #[serde(default)]
    pub discriminator: Option<Preset<DiscriminatorConfig>>,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub pyramid_loss: bool,
    #[serde(default = "one")]
    pub adv_multiplier: f64,
}

impl TrainRun {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let model = match &self.model {
            Preset::Name(n) => ModelConfig::preset(n)?,
            Preset::Full(c) => c.clone(),
        };
        let discriminator = match &self.discriminator {
            None => match &self.model {
                Preset::Name(n) => DiscriminatorConfig::preset(n)?,
                Preset::Full(_) => DiscriminatorConfig::desk(),
            },
            Some(Preset::Name(n)) => DiscriminatorConfig::preset(n)?,
            Some(Preset::Full(c)) => c.clone(),
        };
        let cfg = TrainConfig {
            model,
            discriminator,
            stages: self.stages.clone(),
            seed: self.seed,
            pyramid_loss: self.pyramid_loss,
            adv_multiplier: self.adv_multiplier,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_schedule_decays() {
        let s = StageConfig::paper_schedule();
        assert_eq!(LearningRates::at_epoch(&s[0], 19).main, 1e-4);
        assert_eq!(LearningRates::at_epoch(&s[0], 20).main, 5e-5);
        assert_eq!(LearningRates::at_epoch(&s[0], 39).main, 5e-5);
        let mut lr = LearningRates::initial(&s[2]);
        let halvings = (0..20).filter(|&e| decay_lr(&mut lr, e, &s[2])).collect::<Vec<_>>();
        assert_eq!(halvings, vec![5, 10, 15]);
        assert_eq!(lr.main, 1e-4 / 8.0);
        assert_eq!(lr.disc, 1e-5 / 8.0);
        let mut lr = LearningRates::initial(&s[1]);
        assert!(!decay_lr(&mut lr, 7, &s[1]));
        assert_eq!(lr, LearningRates::initial(&s[1]));
    }

    #[test]
    fn adversarial_epochs() {
        let s = StageConfig::paper_schedule();
        assert!(!s[0].is_adversarial(39));
        assert!(!s[1].is_adversarial(14));
        assert!(s[1].is_adversarial(15));
        assert_eq!((0..30).filter(|&e| s[1].is_adversarial(e)).count(), 15);
    }

    #[test]
    fn validation_runs_before_compute() {
        let mut cfg = TrainConfig::new(ModelConfig::desk(), DiscriminatorConfig::desk(), vec![StageConfig::new(60, 1, 2)], 0);
        assert!(cfg.validate().unwrap_err().to_string().contains("multiple of 8"));
        cfg.stages[0].patch_size = 64;
        cfg.validate().unwrap();
        cfg.stages.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn run_file_accepts_presets_and_defaults() {
        let run: TrainRun = serde_json::from_str(
            r#"{"manifest":"m.json","output_dir":"out","model":"desk",
                "stages":[{"patch_size":64,"epochs":2,"batch_size":4}]}"#,
        )
        .unwrap();
        let cfg = run.resolve().unwrap();
        assert_eq!(cfg.model, ModelConfig::desk());
        assert_eq!(cfg.stages[0].lr_main, 1e-4);
        assert_eq!(cfg.stages[0].adversarial_from_epoch, -1);
        assert!(cfg.pyramid_loss);
        assert_eq!(cfg.seed, 0);
    }
}
