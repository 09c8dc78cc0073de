use std::fmt::Write as _;

use serde::Serialize;

use super::{evaluate_head, train_on, PipelineError, Result};
use crate::dataset::{DatasetManifest, Record, Split};
use crate::metrics::Metrics;
use crate::train::{FeatureCache, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Record paths evaluated in this fold.
    pub evaluated: Vec<String>,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean_top1: f64,
    pub std_top1: f64,
    pub mean_top5: f64,
    pub std_top5: f64,
}

/// Mean and sample standard deviation.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl CvReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<6} {:>7} {:>6} {:>8} {:>8}", "fold", "train", "eval", "top-1", "top-5");
        for f in &self.folds {
            let _ = writeln!(
                s,
                "{:<6} {:>7} {:>6} {:>7.1}% {:>7.1}%",
                f.fold,
                f.train_samples,
                f.eval_samples,
                100.0 * f.metrics.top1(),
                100.0 * f.metrics.top5()
            );
        }
        let _ = writeln!(
            s,
            "mean   top-1 {:.1}% ± {:.1}, top-5 {:.1}% ± {:.1}",
            100.0 * self.mean_top1,
            100.0 * self.std_top1,
            100.0 * self.mean_top5,
            100.0 * self.std_top5
        );
        s
    }
}

/// For each fold `i`, trains a head on training records of the other folds
/// (augmented ones included) and evaluates it on the originals of fold `i`.
/// The test split takes no part. Features come from `cache`, computed once.
pub fn cross_validate(manifest: &DatasetManifest, cache: &FeatureCache, config: &TrainConfig, k: usize) -> Result<CvReport> {
    if k < 2 {
        return Err(PipelineError::Invalid(format!("cross-validation needs k >= 2, got {k}")));
    }
    let train: Vec<&Record> = manifest.records.iter().filter(|r| r.split == Some(Split::Train)).collect();
    if let Some(r) = train.iter().find(|r| r.fold.is_some_and(|f| f >= k)) {
        return Err(PipelineError::Invalid(format!("{} is in fold {:?}, outside 0..{k}", r.path, r.fold)));
    }
    let mut folds = Vec::with_capacity(k);
    for i in 0..k {
        let fit: Vec<&Record> = train.iter().copied().filter(|r| r.fold.is_some_and(|f| f != i)).collect();
        let held: Vec<&Record> = train.iter().copied().filter(|r| r.is_original() && r.fold == Some(i)).collect();
        if held.is_empty() {
            return Err(PipelineError::Invalid(format!("fold {i} has no samples")));
        }
        if fit.is_empty() {
            return Err(PipelineError::Invalid(format!("fold {i} leaves nothing to train on")));
        }
        let outcome = train_on(cache, &fit, config)?;
        let e = evaluate_head(&outcome.head, cache, &held, &[1, 5])?;
        folds.push(FoldResult {
            fold: i,
            train_samples: fit.len(),
            eval_samples: held.len(),
            evaluated: held.iter().map(|r| r.path.clone()).collect(),
            metrics: e.metrics,
        });
    }
    let t1: Vec<f64> = folds.iter().map(|f| f.metrics.top1()).collect();
    let t5: Vec<f64> = folds.iter().map(|f| f.metrics.top5()).collect();
    let (mean_top1, std_top1) = mean_std(&t1);
    let (mean_top5, std_top5) = mean_std(&t5);
    Ok(CvReport {
        folds,
        mean_top1,
        std_top1,
        mean_top5,
        std_top5,
    })
}
