use std::collections::BTreeSet;
use std::path::Path;

use super::config::TrainConfig;
use super::train::{evaluate, train, Sample, Trainer};
use crate::data::{kfold_split, write_atomic, FoldSplit};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::postprocess::SeedParams;
use crate::tensor::Real;

/// Which records one fold trained on and which it was scored on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAudit {
    pub fold: usize,
    /// Record ids that entered a gradient step.
    pub trained: BTreeSet<usize>,
    pub evaluated: BTreeSet<usize>,
}

impl FoldAudit {
    pub fn is_clean(&self) -> bool {
        self.trained.is_disjoint(&self.evaluated)
    }
}

#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub split: FoldSplit,
    pub report: MetricsReport,
    pub audits: Vec<FoldAudit>,
    /// Sum of all learnable parameters of each final fold model; a cheap
    /// fingerprint for telling the fold models apart.
    pub fingerprints: Vec<f64>,
}

impl CrossValidation {
    pub fn audit_passes(&self) -> bool {
        let evaluated: Vec<usize> = self.audits.iter().flat_map(|a| a.evaluated.iter().copied()).collect();
        let distinct: BTreeSet<usize> = evaluated.iter().copied().collect();
        self.audits.iter().all(FoldAudit::is_clean) && distinct.len() == evaluated.len()
    }

    /// `fold,role,record` lines.
    pub fn audit_csv(&self) -> String {
        let mut s = String::from("fold,role,record\n");
        for a in &self.audits {
            for id in &a.trained {
                s.push_str(&format!("{},train,{id}\n", a.fold));
            }
            for id in &a.evaluated {
                s.push_str(&format!("{},eval,{id}\n", a.fold));
            }
        }
        s
    }
}

/// Trains one model per fold on the other folds (run seed `seed + fold`) and
/// scores its final parameters on the held-out fold. With `out`, each fold's
/// log and checkpoints go to `out/fold{k}`, and `metrics.csv` and `audit.csv`
/// to `out`.
pub fn cross_validate<T: Real>(
    samples: &[Sample],
    config: &TrainConfig,
    k: usize,
    out: Option<&Path>,
) -> Result<CrossValidation> {
    config.validate()?;
    let split = kfold_split(samples.len(), k, config.seed)?;
    let mut images = Vec::with_capacity(samples.len());
    let mut audits = Vec::with_capacity(k);
    let mut fingerprints = Vec::with_capacity(k);
    for fold in 0..k {
        let train_set: Vec<Sample> = split.training(fold).into_iter().map(|i| samples[i].clone()).collect();
        let held_out: Vec<Sample> = split.validation(fold).iter().map(|&i| samples[i].clone()).collect();
        let fold_config = TrainConfig { seed: config.seed.wrapping_add(fold as u64), ..config.clone() };
        let dir = out.map(|d| d.join(format!("fold{fold}")));
        log::info!("fold {}/{k}: {} training, {} held-out records", fold + 1, train_set.len(), held_out.len());
        let trainer = train(Trainer::<T>::new(fold_config, &train_set)?, &train_set, &held_out, dir.as_deref())?;
        let metrics = evaluate(
            &trainer.network,
            &trainer.stats,
            &held_out,
            fold,
            config.tta,
            config.val_batch_size,
            SeedParams::default(),
        )?;
        images.extend(metrics);
        audits.push(FoldAudit {
            fold,
            trained: trainer.seen.clone(),
            evaluated: held_out.iter().map(|s| s.id).collect(),
        });
        fingerprints
            .push(trainer.network.params.learnable().flat_map(|(_, t)| t.data().iter().map(|v| v.as_f64())).sum());
    }
    let report = MetricsReport::new(images, config.num_classes())?;
    let cv = CrossValidation { split, report, audits, fingerprints };
    if let Some(dir) = out {
        cv.report.save_csv(&dir.join("metrics.csv"))?;
        write_atomic(&dir.join("audit.csv"), cv.audit_csv().as_bytes())?;
    }
    if !cv.audit_passes() {
        return Err(Error::Invalid(
            "cross-validation audit failed: a model was scored on a record it trained on".into(),
        ));
    }
    Ok(cv)
}
