use std::path::Path;

use crate::augment::{AugmentationConfig, Preset, StatsSource};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind, TverskyForm};
use crate::nn::NetworkConfig;
use crate::tensor::Precision;

/// Source of the cross-entropy class weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassWeighting {
    /// Recomputed from the pixel counts of every batch.
    #[default]
    PerBatch,
    /// Fixed once from the pixel counts of the whole training set.
    Dataset,
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// First (1-based) epoch trained at the decayed rate.
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub train_batch_size: usize,
    pub val_batch_size: usize,
    pub loss: LossConfig,
    pub class_weighting: ClassWeighting,
    pub augmentation: AugmentationConfig,
    pub tta: bool,
    pub seed: u64,
    pub precision: Precision,
    pub normalization: StatsSource,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Full-size schedule and architecture.
    pub fn paper() -> Self {
        Self {
            epochs: 60,
            learning_rate: 1e-4,
            decay_epoch: 30,
            decay_factor: 0.5,
            train_batch_size: 4,
            val_batch_size: 2,
            loss: LossConfig::default(),
            class_weighting: ClassWeighting::PerBatch,
            augmentation: AugmentationConfig::preset(Preset::High),
            tta: true,
            seed: 0,
            precision: Precision::F32,
            normalization: StatsSource::Dataset,
            network: NetworkConfig::paper(),
        }
    }

    /// Shorter schedule on the desk-scale network.
    pub fn desk() -> Self {
        Self { epochs: 30, network: NetworkConfig::desk(), ..Self::paper() }
    }

    pub fn num_classes(&self) -> usize {
        self.network.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning rate {} must be finite and non-negative", self.learning_rate));
        }
        if self.decay_epoch == 0 || self.decay_epoch > self.epochs {
            return bad(format!("decay epoch {} must lie in 1..={}", self.decay_epoch, self.epochs));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return bad(format!("decay factor {} must be positive", self.decay_factor));
        }
        if self.train_batch_size == 0 || self.val_batch_size == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        let (a, b) = (self.loss.tversky_alpha, self.loss.tversky_beta);
        if !(a >= 0.0 && b >= 0.0 && a + b > 0.0) {
            return bad(format!("tversky weights ({a}, {b}) must be non-negative and not both zero"));
        }
        self.augmentation.validate()?;
        self.network.validate()
    }

    /// Learning rate of a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.learning_rate * self.decay_factor
        } else {
            self.learning_rate
        }
    }

    /// Every setting as `(key, value)` pairs, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let n = &self.network;
        let depths: Vec<String> = n.stage_depths.iter().map(|d| d.to_string()).collect();
        vec![
            ("epochs", self.epochs.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("decay_epoch", self.decay_epoch.to_string()),
            ("decay_factor", self.decay_factor.to_string()),
            ("train_batch_size", self.train_batch_size.to_string()),
            ("val_batch_size", self.val_batch_size.to_string()),
            ("loss", self.loss.kind.to_string()),
            ("tversky_alpha", self.loss.tversky_alpha.to_string()),
            ("tversky_beta", self.loss.tversky_beta.to_string()),
            ("tversky_form", tversky_form_name(self.loss.tversky_form).into()),
            ("class_weighting", weighting_name(self.class_weighting).into()),
            ("augmentation", self.augmentation.preset.to_string()),
            ("augmentation.apply_probability", self.augmentation.apply_probability.to_string()),
            ("augmentation.hue_scale", self.augmentation.hue_scale.to_string()),
            ("tta", self.tta.to_string()),
            ("seed", self.seed.to_string()),
            ("precision", self.precision.to_string()),
            ("normalization", stats_source_name(self.normalization).into()),
            ("network.in_channels", n.in_channels.to_string()),
            ("network.num_classes", n.num_classes.to_string()),
            ("network.stage_depths", depths.join(",")),
            ("network.base_width", n.base_width.to_string()),
            ("network.block_kind", n.block_kind.to_string()),
            ("network.se_reduction", n.se_reduction.to_string()),
            ("network.height", n.height.to_string()),
            ("network.width", n.width.to_string()),
            ("network.decoder_wiring", n.decoder_wiring.to_string()),
        ]
    }

    /// Applies one setting. `augmentation` resets the transform ranges to
    /// the named preset, so it should come before the other augmentation keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "learning_rate" | "lr" => self.learning_rate = num(key, value)?,
            "decay_epoch" => self.decay_epoch = num(key, value)?,
            "decay_factor" => self.decay_factor = num(key, value)?,
            "train_batch_size" => self.train_batch_size = num(key, value)?,
            "val_batch_size" => self.val_batch_size = num(key, value)?,
            "loss" => self.loss.kind = value.parse::<LossKind>()?,
            "tversky_alpha" => self.loss.tversky_alpha = num(key, value)?,
            "tversky_beta" => self.loss.tversky_beta = num(key, value)?,
            "tversky_form" => self.loss.tversky_form = value.parse::<TverskyForm>()?,
            "class_weighting" => {
                self.class_weighting = match value {
                    "per_batch" => ClassWeighting::PerBatch,
                    "dataset" => ClassWeighting::Dataset,
                    other => return Err(Error::Config(format!("unknown class weighting `{other}`"))),
                }
            }
            "augmentation" => self.augmentation = AugmentationConfig::preset(value.parse::<Preset>()?),
            "augmentation.apply_probability" => self.augmentation.apply_probability = num(key, value)?,
            "augmentation.hue_scale" => self.augmentation.hue_scale = num(key, value)?,
            "tta" => self.tta = boolean(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "precision" => self.precision = value.parse::<Precision>()?,
            "normalization" => {
                self.normalization = match value {
                    "dataset" => StatsSource::Dataset,
                    "pretraining" => StatsSource::Pretraining,
                    other => return Err(Error::Config(format!("unknown normalization `{other}`"))),
                }
            }
            "network.in_channels" => self.network.in_channels = num(key, value)?,
            "network.num_classes" | "num_classes" => self.network.num_classes = num(key, value)?,
            "network.stage_depths" => {
                self.network.stage_depths = value.split(',').map(|d| num(key, d.trim())).collect::<Result<_>>()?
            }
            "network.base_width" => self.network.base_width = num(key, value)?,
            "network.block_kind" => self.network.block_kind = value.parse()?,
            "network.se_reduction" => self.network.se_reduction = num(key, value)?,
            "network.height" => self.network.height = num(key, value)?,
            "network.width" => self.network.width = num(key, value)?,
            "network.decoder_wiring" => self.network.decoder_wiring = value.parse()?,
            other => return Err(Error::Config(format!("unknown setting `{other}`"))),
        }
        Ok(())
    }

    /// Flat `key = value` lines; `#` starts a comment.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::desk();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn num<N: std::str::FromStr>(key: &str, value: &str) -> Result<N> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn tversky_form_name(f: TverskyForm) -> &'static str {
    match f {
        TverskyForm::Doubled => "doubled",
        TverskyForm::Conventional => "conventional",
    }
}

fn weighting_name(w: ClassWeighting) -> &'static str {
    match w {
        ClassWeighting::PerBatch => "per_batch",
        ClassWeighting::Dataset => "dataset",
    }
}

fn stats_source_name(s: StatsSource) -> &'static str {
    match s {
        StatsSource::Dataset => "dataset",
        StatsSource::Pretraining => "pretraining",
    }
}
