use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};

use super::train::Trainer;
use crate::augment::{normalize, tta_probs, NormalizationStats};
use crate::data::{read_image, write_image, write_instances, write_mask, DatasetManifest};
use crate::error::{Error, Result};
use crate::mask::{InstanceMap, LabelMask};
use crate::metrics::{ImageMetrics, MetricsReport};
use crate::nn::{Network, INPUT_MULTIPLE};
use crate::postprocess::{argmax_mask, split_touching, SeedParams, BORDER};
use crate::tensor::{Real, Tensor};
use crate::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InferOptions {
    pub tta: bool,
    pub seeds: SeedParams,
}

/// Everything inferred for one image, at the image's own extent.
#[derive(Debug, Clone)]
pub struct Inference<T> {
    /// Probabilities at the (possibly resized) network input extent.
    pub probs: Tensor<T>,
    pub mask: LabelMask,
    pub instances: InstanceMap,
    pub overlay: RgbImage,
}

/// Nearest multiple of 32 (at least 32).
pub fn network_extent(n: u32) -> u32 {
    let m = INPUT_MULTIPLE as u32;
    (((n + m / 2) / m) * m).max(m)
}

pub fn infer_image<T: Real>(
    network: &Network<T>,
    stats: &NormalizationStats,
    image: &RgbImage,
    opts: InferOptions,
) -> Result<Inference<T>> {
    let (w, h) = image.dimensions();
    let (nw, nh) = (network_extent(w), network_extent(h));
    let resized;
    let input = if (nw, nh) != (w, h) {
        log::warn!("input {w}x{h} is not a multiple of {INPUT_MULTIPLE}; resizing to {nw}x{nh}");
        resized = imageops::resize(image, nw, nh, FilterType::Triangle);
        &resized
    } else {
        image
    };
    let probs = tta_probs(network, &normalize::<T>(input, stats)?, opts.tta)?;
    let mut mask = argmax_mask(&probs)?.remove(0);
    if (nw, nh) != (w, h) {
        let gray = image::GrayImage::from_raw(nw, nh, mask.data().to_vec()).expect("mask extent");
        let back = imageops::resize(&gray, w, h, FilterType::Nearest);
        mask = LabelMask::new(w as usize, h as usize, back.into_raw())?;
    }
    let instances = split_touching(&mask, None, opts.seeds)?;
    let overlay = overlay(image, &mask, &instances);
    Ok(Inference { probs, mask, instances, overlay })
}

/// Input with instance outlines in yellow and the predicted border class
/// tinted cyan.
pub fn overlay(image: &RgbImage, mask: &LabelMask, instances: &InstanceMap) -> RgbImage {
    let mut out = image.clone();
    let edges = instances.boundaries();
    for (i, px) in out.pixels_mut().enumerate() {
        if edges[i] {
            px.0 = [255, 230, 0];
        } else if mask.data()[i] == BORDER {
            px.0 = [px.0[0] / 2, px.0[1] / 2 + 100, px.0[2] / 2 + 100];
        }
    }
    out
}

/// Image files in a directory (png, jpg, tif), sorted, or the path itself.
pub fn input_images(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "tif" | "tiff"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Invalid(format!("no images in {}", path.display())));
    }
    Ok(files)
}

/// Runs a checkpoint over an image or a directory of images, writing
/// `<stem>_mask.png`, `<stem>_instances.png` and `<stem>_overlay.png` to
/// `out`, plus a manifest of the predictions. Returns the written manifest.
pub fn infer_files<T: Real>(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    opts: InferOptions,
) -> Result<DatasetManifest> {
    let trainer = Trainer::<T>::load(checkpoint)?;
    let mut records = Vec::new();
    for path in input_images(input)? {
        let image = read_image(&path)?;
        let r = infer_image(&trainer.network, &trainer.stats, &image, opts)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        let mask_name = PathBuf::from(format!("{stem}_mask.png"));
        let inst_name = PathBuf::from(format!("{stem}_instances.png"));
        write_mask(&out.join(&mask_name), &r.mask)?;
        write_instances(&out.join(&inst_name), &r.instances)?;
        write_image(&out.join(format!("{stem}_overlay.png")), &r.overlay)?;
        let classes = trainer.config.num_classes();
        records.push(crate::data::ManifestRecord {
            image: std::path::absolute(&path).unwrap_or(path.clone()),
            mask2: (classes == 2).then(|| mask_name.clone()),
            mask3: (classes == 3).then_some(mask_name),
            instances: Some(inst_name),
            split: "predicted".into(),
        });
    }
    let manifest = DatasetManifest { root: out.to_path_buf(), records };
    manifest.save(&out.join("predictions.tsv"))?;
    Ok(manifest)
}

/// Scores predictions against ground truth, pairing records by image name.
/// The fold column is the ground-truth split tag when it is a number, else 0.
pub fn eval_manifests(pred: &DatasetManifest, gt: &DatasetManifest, num_classes: usize) -> Result<MetricsReport> {
    let mut images = Vec::with_capacity(gt.len());
    for (gi, g) in gt.records.iter().enumerate() {
        let name = g.name();
        let pi = pred
            .records
            .iter()
            .position(|p| p.name() == name)
            .ok_or_else(|| Error::Invalid(format!("no prediction for `{name}`")))?;
        let pr = &pred.records[pi];
        // a prediction manifest may hold either mask flavour
        let pmask_path = pr.mask(num_classes).or(pr.mask2.as_deref()).or(pr.mask3.as_deref());
        let pmask = match pmask_path {
            Some(p) => crate::data::read_mask(&pred.resolve(p))?,
            None => return Err(Error::Invalid(format!("prediction `{name}` has no class mask"))),
        };
        let gmask = gt.read_mask(gi, num_classes)?;
        let pinst = match pr.instances {
            Some(_) => pred.read_instances(pi)?,
            None => split_touching(&pmask, None, SeedParams::default())?,
        };
        let ginst = match g.instances {
            Some(_) => gt.read_instances(gi)?,
            None => crate::postprocess::connected_components(&gmask.to_two_class(), 1),
        };
        let fold = g.split.parse().unwrap_or(0);
        images.push(ImageMetrics::evaluate(name, fold, &pmask, &gmask, &pinst, &ginst, num_classes)?);
    }
    MetricsReport::new(images, num_classes)
}
