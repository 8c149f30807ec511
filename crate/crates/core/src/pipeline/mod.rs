//! Training loop, checkpoints, cross-validation and inference.

mod adam;
mod checkpoint;
mod config;
mod cv;
mod infer;
mod train;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{checkpoint_precision, MAGIC};
pub use config::{ClassWeighting, TrainConfig};
pub use cv::{cross_validate, CrossValidation, FoldAudit};
pub use infer::{
    eval_manifests, infer_files, infer_image, input_images, network_extent, overlay, InferOptions, Inference,
};
pub use train::{evaluate, load_samples, predict_batch, train, EpochLog, Sample, Trainer, LOG_HEADER};
