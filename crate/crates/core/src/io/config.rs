//! Flat key-value run configuration (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::DiceClasses;
use crate::network::{ArchConfig, Variant};
use crate::train::{AdamConfig, AugmentationConfig, LossKind, TrainConfig};

/// Everything that determines a training run. Missing keys take defaults;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: Variant,
    pub widths: [usize; 3],
    pub dropout_width: usize,
    pub loss: LossKind,
    /// Average the soft Dice over every class with this smoothing term
    /// instead of only the classes present in the subvolume.
    pub dice_epsilon: Option<f64>,
    pub seed: u64,
    pub subvolume: usize,
    pub iterations: usize,
    pub workers: usize,
    pub val_every: usize,
    pub patience: Option<usize>,
    pub min_delta: f64,
    pub stop_at_dcs: Option<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub augment: bool,
    pub randomize_threshold: bool,
    pub eval_pad: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let arch = ArchConfig::new(Variant::Default, 2);
        let train = TrainConfig::default();
        let adam = AdamConfig::default();
        RunConfig {
            arch: arch.variant,
            widths: arch.widths,
            dropout_width: arch.dropout_width,
            loss: train.loss,
            dice_epsilon: None,
            seed: train.seed,
            subvolume: train.subvolume,
            iterations: train.iterations,
            workers: train.workers,
            val_every: train.val_every,
            patience: train.patience,
            min_delta: train.min_delta,
            stop_at_dcs: train.stop_at_dcs,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            augment: true,
            randomize_threshold: true,
            eval_pad: train.eval_pad,
        }
    }
}

impl RunConfig {
    pub fn arch_config(&self, num_classes: usize) -> ArchConfig {
        ArchConfig::new(self.arch, num_classes)
            .with_widths(self.widths)
            .with_dropout_width(self.dropout_width)
    }

    pub fn train_config(&self) -> TrainConfig {
        let augmentation = if self.augment {
            AugmentationConfig {
                randomize_threshold: self.randomize_threshold,
                ..Default::default()
            }
        } else {
            AugmentationConfig {
                randomize_threshold: self.randomize_threshold,
                ..AugmentationConfig::disabled()
            }
        };
        TrainConfig {
            subvolume: self.subvolume,
            iterations: self.iterations,
            workers: self.workers,
            val_every: self.val_every,
            patience: self.patience,
            min_delta: self.min_delta,
            stop_at_dcs: self.stop_at_dcs,
            seed: self.seed,
            loss: self.loss,
            dice_classes: match self.dice_epsilon {
                Some(epsilon) => DiceClasses::AllSmoothed { epsilon },
                None => DiceClasses::PresentInTruth,
            },
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
            augmentation,
            eval_pad: self.eval_pad,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Key-sorted TOML document; unset optional keys are omitted.
    pub fn to_canonical_toml(&self) -> Result<String> {
        let table = toml::Table::try_from(self).map_err(|e| Error::invalid(e.to_string()))?;
        let sorted: std::collections::BTreeMap<_, _> = table.into_iter().collect();
        toml::to_string(&sorted).map_err(|e| Error::invalid(e.to_string()))
    }
}
