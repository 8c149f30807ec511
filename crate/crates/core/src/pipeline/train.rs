use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;

use super::adam::{adam_step, AdamState};
use super::config::{ClassWeighting, TrainConfig};
use crate::augment::{apply_pipeline, normalize_batch, tta_probs, NormalizationStats, StatsSource};
use crate::data::{write_atomic, DatasetManifest, Scene};
use crate::error::{Error, Result};
use crate::losses::{class_weights, loss_on_graph, one_hot, LossConfig, Weighting};
use crate::mask::{InstanceMap, LabelMask};
use crate::metrics::ImageMetrics;
use crate::nn::{network_forward, Forward, Network};
use crate::postprocess::{argmax_mask, connected_components, split_touching, SeedParams};
use crate::seed::{derive_seed, stream};
use crate::tensor::{BnMode, Graph, Real};
use crate::RgbImage;

// stream tags
const INIT: u64 = 1;
const SHUFFLE: u64 = 2;
const AUGMENT: u64 = 3;

/// One image with its targets, held in memory for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Index of the record in its manifest; used for split audits.
    pub id: usize,
    pub name: String,
    pub image: RgbImage,
    pub mask: LabelMask,
    pub instances: InstanceMap,
}

impl Sample {
    pub fn from_scene(id: usize, name: impl Into<String>, scene: &Scene, num_classes: usize) -> Self {
        Self {
            id,
            name: name.into(),
            image: scene.image.clone(),
            mask: if num_classes == 3 { scene.mask3.clone() } else { scene.mask2.clone() },
            instances: scene.instances.clone(),
        }
    }
}

/// Reads the given manifest records. Records without an instance map use the
/// connected components of their epithelium.
pub fn load_samples(manifest: &DatasetManifest, indices: &[usize], num_classes: usize) -> Result<Vec<Sample>> {
    indices
        .iter()
        .map(|&i| {
            let record = manifest
                .records
                .get(i)
                .ok_or_else(|| Error::Invalid(format!("record {i} out of range ({} records)", manifest.len())))?;
            let image = manifest.read_image(i)?;
            let mask = manifest.read_mask(i, num_classes)?;
            if (mask.width(), mask.height()) != (image.width() as usize, image.height() as usize) {
                return Err(Error::format(manifest.resolve(&record.image), "mask extent differs from image"));
            }
            if mask.max_label() as usize >= num_classes {
                return Err(Error::format(
                    manifest.resolve(&record.image),
                    format!("mask label {} with {num_classes} classes", mask.max_label()),
                ));
            }
            let instances = match record.instances {
                Some(_) => manifest.read_instances(i)?,
                None => connected_components(&mask.to_two_class(), 1),
            };
            Ok(Sample { id: i, name: record.name(), image, mask, instances })
        })
        .collect()
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean held-out epithelium IoU and F-score; absent without validation data.
    pub val_iou: Option<f64>,
    pub val_fscore: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_iou,val_fscore";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        format!("{},{},{},{},{}", self.epoch, self.lr, self.train_loss, opt(self.val_iou), opt(self.val_fscore))
    }

    pub fn parse_row(row: &str) -> Result<Self> {
        let f: Vec<&str> = row.split(',').collect();
        let bad = || Error::Invalid(format!("malformed log row `{row}`"));
        if f.len() != 5 {
            return Err(bad());
        }
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { s.parse().map(Some).map_err(|_| bad()) };
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            lr: f[1].parse().map_err(|_| bad())?,
            train_loss: f[2].parse().map_err(|_| bad())?,
            val_iou: opt(f[3])?,
            val_fscore: opt(f[4])?,
        })
    }
}

/// Complete state of a training run between two optimizer steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub network: Network<T>,
    pub adam: AdamState<T>,
    pub stats: NormalizationStats,
    /// Loss settings with any dataset-level class weights resolved.
    pub loss: LossConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed batches of the current epoch.
    pub batch: usize,
    pub(crate) loss_sum: f64,
    /// Epoch and held-out F-score of the best epoch so far.
    pub best: Option<(usize, f64)>,
    pub log: Vec<EpochLog>,
    /// Ids of every sample a gradient step has used.
    pub seen: BTreeSet<usize>,
}

impl<T: Real> Trainer<T> {
    /// Fresh run: initializes the network from the run seed and derives
    /// normalization statistics and class weights from the training set.
    pub fn new(config: TrainConfig, train: &[Sample]) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Invalid("no training samples".into()));
        }
        for s in train {
            config
                .network
                .check_input(s.image.height() as usize, s.image.width() as usize)
                .map_err(|e| Error::Invalid(format!("training image `{}`: {e}", s.name)))?;
        }
        let stats = match config.normalization {
            StatsSource::Dataset => NormalizationStats::from_images(train.iter().map(|s| &s.image))?,
            StatsSource::Pretraining => NormalizationStats::pretraining(),
        };
        let mut loss = config.loss.clone();
        if config.class_weighting == ClassWeighting::Dataset {
            let mut counts = vec![0u64; config.num_classes()];
            for s in train {
                for (c, n) in s.mask.histogram(config.num_classes()).into_iter().enumerate() {
                    counts[c] += n;
                }
            }
            loss.weighting = Weighting::Fixed(class_weights(&counts)?);
        }
        let network = Network::new(config.network.clone(), derive_seed(config.seed, &[INIT]))?;
        let adam = AdamState::new(&network.params);
        Ok(Self {
            config,
            network,
            adam,
            stats,
            loss,
            epoch: 0,
            batch: 0,
            loss_sum: 0.0,
            best: None,
            log: Vec::new(),
            seen: BTreeSet::new(),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Rate used by the next step.
    pub fn lr(&self) -> f64 {
        self.config.lr_at(self.epoch + 1)
    }

    fn batches(&self, n: usize) -> usize {
        n.div_ceil(self.config.train_batch_size)
    }

    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(self.config.seed, &[SHUFFLE, self.epoch as u64]));
        order
    }

    /// Runs the next batch of the current epoch and returns its loss.
    pub fn step(&mut self, train: &[Sample]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Invalid("no training samples".into()));
        }
        if self.batch >= self.batches(train.len()) {
            return Err(Error::Invalid("epoch already complete; call finish_epoch".into()));
        }
        let bs = self.config.train_batch_size;
        let order = self.epoch_order(train.len());
        let start = self.batch * bs;
        let picked = &order[start..(start + bs).min(train.len())];

        let mut images = Vec::with_capacity(picked.len());
        let mut masks = Vec::with_capacity(picked.len());
        for (j, &i) in picked.iter().enumerate() {
            let seed = derive_seed(self.config.seed, &[AUGMENT, self.epoch as u64, (start + j) as u64]);
            let (img, mask) = apply_pipeline(&train[i].image, &train[i].mask, &self.config.augmentation, seed)?;
            images.push(img);
            masks.push(mask);
        }
        let x = normalize_batch::<T>(&images.iter().collect::<Vec<_>>(), &self.stats)?;
        let onehot = one_hot::<T>(&masks.iter().collect::<Vec<_>>(), self.config.num_classes())?;

        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut f = Forward::new(&mut g, &self.network.params, BnMode::Train, true);
        let logits = network_forward(&mut f, xv, &self.network.config)?;
        let out = f.finish();
        let probs = g.softmax(logits)?;
        let loss = loss_on_graph(&mut g, probs, &onehot, &self.loss)?;
        let value = g.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: self.epoch + 1, batch: self.batch + 1, loss: value });
        }
        g.backward(loss)?;
        let grads = out.gradients(&g, &self.network.params);
        out.apply_stats(&mut self.network.params)?;
        let lr = self.lr();
        adam_step(&mut self.network.params, &grads, &mut self.adam, lr)?;

        self.seen.extend(picked.iter().map(|&i| train[i].id));
        self.loss_sum += value;
        self.batch += 1;
        Ok(value)
    }

    /// Closes the current epoch: scores `val` (if any) and appends a log row.
    pub fn finish_epoch(&mut self, val: &[Sample]) -> Result<EpochLog> {
        let (val_iou, val_fscore) = if val.is_empty() {
            (None, None)
        } else {
            let m =
                evaluate(&self.network, &self.stats, val, 0, false, self.config.val_batch_size, SeedParams::default())?;
            let n = m.len() as f64;
            (Some(m.iter().map(|x| x.iou()).sum::<f64>() / n), Some(m.iter().map(|x| x.fscore()).sum::<f64>() / n))
        };
        let row = EpochLog {
            epoch: self.epoch + 1,
            lr: self.lr(),
            train_loss: if self.batch == 0 { f64::NAN } else { self.loss_sum / self.batch as f64 },
            val_iou,
            val_fscore,
        };
        self.epoch += 1;
        self.batch = 0;
        self.loss_sum = 0.0;
        if let Some(f) = val_fscore {
            if self.best.is_none_or(|(_, b)| f > b) {
                self.best = Some((row.epoch, f));
            }
        }
        self.log.push(row);
        Ok(row)
    }

    /// Finishes the current epoch (resuming mid-epoch if needed).
    pub fn run_epoch(&mut self, train: &[Sample], val: &[Sample]) -> Result<EpochLog> {
        while self.batch < self.batches(train.len()) {
            self.step(train)?;
        }
        self.finish_epoch(val)
    }

    pub fn log_csv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for row in &self.log {
            s.push_str(&row.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Trains to the configured epoch count. With `out`, the log is rewritten
/// after every epoch, `best.ckpt` whenever the held-out F-score improves and
/// `final.ckpt` at the end.
pub fn train<T: Real>(
    mut trainer: Trainer<T>,
    train: &[Sample],
    val: &[Sample],
    out: Option<&Path>,
) -> Result<Trainer<T>> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    while !trainer.is_finished() {
        let before = trainer.best;
        let row = trainer.run_epoch(train, val)?;
        log::info!("{}", row.csv_row());
        if let Some(dir) = out {
            write_atomic(&dir.join("train_log.csv"), trainer.log_csv().as_bytes())?;
            if trainer.best != before {
                trainer.save(&dir.join("best.ckpt"))?;
            }
        }
    }
    if let Some(dir) = out {
        trainer.save(&dir.join("final.ckpt"))?;
    }
    Ok(trainer)
}

/// Class probabilities of a normalized batch of equally sized images.
pub fn predict_batch<T: Real>(
    network: &Network<T>,
    stats: &NormalizationStats,
    images: &[&RgbImage],
    tta: bool,
) -> Result<Vec<LabelMask>> {
    let x = normalize_batch::<T>(images, stats)?;
    argmax_mask(&tta_probs(network, &x, tta)?)
}

/// Scores every sample: class masks by argmax, instances by splitting the
/// predicted epithelium.
pub fn evaluate<T: Real>(
    network: &Network<T>,
    stats: &NormalizationStats,
    samples: &[Sample],
    fold: usize,
    tta: bool,
    batch_size: usize,
    seeds: SeedParams,
) -> Result<Vec<ImageMetrics>> {
    let c = network.config.num_classes;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let images: Vec<&RgbImage> = chunk.iter().map(|s| &s.image).collect();
        let masks = predict_batch(network, stats, &images, tta)?;
        for (s, pred) in chunk.iter().zip(masks) {
            let instances = split_touching(&pred, None, seeds)?;
            out.push(ImageMetrics::evaluate(&s.name, fold, &pred, &s.mask, &instances, &s.instances, c)?);
        }
    }
    Ok(out)
}
