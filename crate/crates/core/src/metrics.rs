//! Pixel and instance metrics, fold aggregation and the metrics CSV.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::{InstanceMap, LabelMask};
use crate::postprocess::EPITHELIUM;

/// Per-class pixel tallies of a prediction against ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        Self { tp: vec![0; num_classes], fp: vec![0; num_classes], fn_: vec![0; num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for c in 0..self.num_classes().min(other.num_classes()) {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
    }
}

pub fn confusion_counts(pred: &LabelMask, gt: &LabelMask, num_classes: usize) -> Result<ConfusionCounts> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::Shape(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mut c = ConfusionCounts::new(num_classes);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p as usize, g as usize);
        if p >= num_classes || g >= num_classes {
            return Err(Error::Invalid(format!("label {} outside {num_classes} classes", p.max(g))));
        }
        if p == g {
            c.tp[p] += 1;
        } else {
            c.fp[p] += 1;
            c.fn_[g] += 1;
        }
    }
    Ok(c)
}

/// `TP / (TP + FP + FN)`; 1 when the class is absent from both masks.
pub fn iou(counts: &ConfusionCounts, class: usize) -> f64 {
    let (tp, fp, fn_) = (counts.tp[class], counts.fp[class], counts.fn_[class]);
    let denom = tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        tp as f64 / denom as f64
    }
}

/// `2TP / (2TP + FP + FN)`; 1 when the class is absent from both masks.
pub fn f_score(counts: &ConfusionCounts, class: usize) -> f64 {
    let (tp, fp, fn_) = (counts.tp[class], counts.fp[class], counts.fn_[class]);
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// Areas of every instance and pairwise intersections of two maps.
struct Overlaps {
    gt_area: Vec<u64>,
    pred_area: Vec<u64>,
    inter: HashMap<(u32, u32), u64>,
}

fn overlaps(gt: &InstanceMap, pred: &InstanceMap) -> Result<Overlaps> {
    if (gt.width(), gt.height()) != (pred.width(), pred.height()) {
        return Err(Error::Shape(format!(
            "instance maps differ in extent: {}x{} vs {}x{}",
            gt.width(),
            gt.height(),
            pred.width(),
            pred.height()
        )));
    }
    let mut inter = HashMap::new();
    for (&g, &p) in gt.data().iter().zip(pred.data()) {
        if g != 0 && p != 0 {
            *inter.entry((g, p)).or_insert(0) += 1;
        }
    }
    Ok(Overlaps { gt_area: gt.areas(), pred_area: pred.areas(), inter })
}

/// Aggregated Jaccard Index.
///
/// Ground-truth instances are visited in ascending id order; each takes the
/// still-unused prediction of highest IoU with it (lowest id on ties; none if
/// nothing unused overlaps). Matched pairs contribute their intersection to
/// the numerator and union to the denominator, unmatched ground truth its
/// area, and predictions never taken their area. Two empty maps score 1.
pub fn aji(gt: &InstanceMap, pred: &InstanceMap) -> Result<f64> {
    let o = overlaps(gt, pred)?;
    let mut by_gt: Vec<Vec<(u32, u64)>> = vec![Vec::new(); o.gt_area.len()];
    for (&(g, p), &n) in &o.inter {
        by_gt[g as usize].push((p, n));
    }
    let mut used = vec![false; o.pred_area.len()];
    let (mut num, mut den) = (0u64, 0u64);
    for g in 1..o.gt_area.len() {
        let ga = o.gt_area[g];
        let mut cands = std::mem::take(&mut by_gt[g]);
        cands.sort_unstable();
        let mut best: Option<(u32, u64, u64)> = None;
        for (p, n) in cands {
            if used[p as usize] {
                continue;
            }
            let union = ga + o.pred_area[p as usize] - n;
            // n / union > bn / bu, compared exactly
            if best.is_none_or(|(_, bn, bu)| n as u128 * bu as u128 > bn as u128 * union as u128) {
                best = Some((p, n, union));
            }
        }
        match best {
            Some((p, n, union)) => {
                used[p as usize] = true;
                num += n;
                den += union;
            }
            None => den += ga,
        }
    }
    for p in 1..o.pred_area.len() {
        if !used[p] {
            den += o.pred_area[p];
        }
    }
    Ok(if den == 0 { 1.0 } else { num as f64 / den as f64 })
}

/// Two-sided 97.5% quantiles of Student's t for 1..=30 degrees of freedom.
const T975: [f64; 30] = [
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179, 2.160, 2.145, 2.131, 2.120,
    2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
];

/// t(0.975, df); beyond the table a Cornish-Fisher expansion around the
/// normal quantile (error below 1e-3 from df = 31 on).
pub fn t_quantile_975(df: usize) -> f64 {
    if (1..=T975.len()).contains(&df) {
        return T975[df - 1];
    }
    let z: f64 = 1.959_963_984_540_054;
    let d = df as f64;
    z + (z.powi(3) + z) / (4.0 * d) + (5.0 * z.powi(5) + 16.0 * z.powi(3) + 3.0 * z) / (96.0 * d * d)
}

/// Mean and 95% confidence half-width `t * s / sqrt(n)`.
pub fn aggregate_folds(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Invalid(format!("confidence interval needs at least 2 values, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, t_quantile_975(n - 1) * var.sqrt() / (n as f64).sqrt()))
}

/// Metrics of one evaluated image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub image: String,
    pub fold: usize,
    /// Per-class counts of the masks as given.
    pub counts: ConfusionCounts,
    /// Counts after merging the border class into epithelium.
    pub epithelium: ConfusionCounts,
    pub aji: f64,
}

impl ImageMetrics {
    /// Scores a predicted label mask and instance map against ground truth.
    pub fn evaluate(
        image: impl Into<String>,
        fold: usize,
        pred: &LabelMask,
        gt: &LabelMask,
        pred_instances: &InstanceMap,
        gt_instances: &InstanceMap,
        num_classes: usize,
    ) -> Result<Self> {
        Ok(Self {
            image: image.into(),
            fold,
            counts: confusion_counts(pred, gt, num_classes)?,
            epithelium: confusion_counts(&pred.to_two_class(), &gt.to_two_class(), 2)?,
            aji: aji(gt_instances, pred_instances)?,
        })
    }

    /// Epithelium IoU, border included.
    pub fn iou(&self) -> f64 {
        iou(&self.epithelium, EPITHELIUM as usize)
    }

    /// Epithelium F-score, border included.
    pub fn fscore(&self) -> f64 {
        f_score(&self.epithelium, EPITHELIUM as usize)
    }
}

/// Fold-level means of the per-image epithelium metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub iou: f64,
    pub fscore: f64,
    pub aji: f64,
}

impl Summary {
    pub fn of(images: &[&ImageMetrics]) -> Self {
        let n = images.len().max(1) as f64;
        Self {
            iou: images.iter().map(|m| m.iou()).sum::<f64>() / n,
            fscore: images.iter().map(|m| m.fscore()).sum::<f64>() / n,
            aji: images.iter().map(|m| m.aji).sum::<f64>() / n,
        }
    }
}

/// Per-image rows, one summary per fold, and the across-fold aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
    pub folds: Vec<(usize, Summary)>,
    /// Mean over folds, and 95% half-widths (when there are at least 2 folds).
    pub mean: Summary,
    pub ci95: Option<Summary>,
    pub num_classes: usize,
}

impl MetricsReport {
    pub fn new(images: Vec<ImageMetrics>, num_classes: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Invalid("no images to report".into()));
        }
        let mut fold_ids: Vec<usize> = images.iter().map(|m| m.fold).collect();
        fold_ids.sort_unstable();
        fold_ids.dedup();
        let folds: Vec<(usize, Summary)> = fold_ids
            .iter()
            .map(|&f| (f, Summary::of(&images.iter().filter(|m| m.fold == f).collect::<Vec<_>>())))
            .collect();
        let column = |pick: fn(&Summary) -> f64| folds.iter().map(|(_, s)| pick(s)).collect::<Vec<f64>>();
        let (ious, fs, ajis) = (column(|s| s.iou), column(|s| s.fscore), column(|s| s.aji));
        let (mean, ci95) = if folds.len() >= 2 {
            let (mi, hi) = aggregate_folds(&ious)?;
            let (mf, hf) = aggregate_folds(&fs)?;
            let (ma, ha) = aggregate_folds(&ajis)?;
            (Summary { iou: mi, fscore: mf, aji: ma }, Some(Summary { iou: hi, fscore: hf, aji: ha }))
        } else {
            (folds[0].1, None)
        };
        Ok(Self { images, folds, mean, ci95, num_classes })
    }

    /// Columns `image,fold,iou,fscore,aji` followed by per-class IoU and
    /// F-score. Fold summaries use the image name `fold_summary`; the final
    /// rows `aggregate_mean` and `aggregate_ci95` have fold `all`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["image", "fold", "iou", "fscore", "aji"].map(String::from).to_vec();
        for c in 0..self.num_classes {
            header.push(format!("iou_class{c}"));
        }
        for c in 0..self.num_classes {
            header.push(format!("fscore_class{c}"));
        }
        w.write_record(&header).map_err(csv_err)?;
        let num = |v: f64| format!("{v:.6}");
        let blank = || vec![String::new(); 2 * self.num_classes];
        for m in &self.images {
            let mut row = vec![m.image.clone(), m.fold.to_string(), num(m.iou()), num(m.fscore()), num(m.aji)];
            row.extend((0..self.num_classes).map(|c| num(iou(&m.counts, c))));
            row.extend((0..self.num_classes).map(|c| num(f_score(&m.counts, c))));
            w.write_record(&row).map_err(csv_err)?;
        }
        let summary_row = |name: &str, fold: String, s: &Summary| {
            let mut row = vec![name.to_string(), fold, num(s.iou), num(s.fscore), num(s.aji)];
            row.extend(blank());
            row
        };
        for (f, s) in &self.folds {
            w.write_record(summary_row("fold_summary", f.to_string(), s)).map_err(csv_err)?;
        }
        w.write_record(summary_row("aggregate_mean", "all".into(), &self.mean)).map_err(csv_err)?;
        if let Some(ci) = &self.ci95 {
            w.write_record(summary_row("aggregate_ci95", "all".into(), ci)).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Invalid(format!("writing metrics: {e}")))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::data::write_atomic(path, &buf)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Invalid(format!("writing metrics CSV: {e}"))
}
