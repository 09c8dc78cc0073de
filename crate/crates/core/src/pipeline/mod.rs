//! End-to-end runs: scan → split → folds → augment → features → train → eval,
//! plus cross-validation and the preprocessing ablation grid.

mod ablation;
mod cv;

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::augment::{self, AugmentReport, AugmentationPolicy};
use crate::dataset::{self, Consolidation, DataRoots, DatasetManifest, Record, ScanReport};
use crate::head::Head;
use crate::metrics::{self, Evaluation};
use crate::model::{Model, ModelError};
use crate::tensor::Matrix;
use crate::train::{self, extract_features, ExtractReport, FeatureCache, TrainConfig, TrainOutcome};

pub use ablation::{run_ablation, AblationCell, AblationReport, AblationRow};
pub use cv::{cross_validate, CvReport, FoldResult};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Augment(#[from] augment::AugmentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SCAN_REPORT_FILE: &str = "scan_report.txt";
pub const AUGMENT_REPORT_FILE: &str = "augment_report.txt";
pub const AUGMENTED_DIR: &str = "augmented";
pub const FEATURES_FILE: &str = "features.plf";
pub const WEIGHTS_FILE: &str = "model.plf";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TABLE: &str = "metrics.txt";
pub const MISPREDICTIONS_CSV: &str = "mispredictions.csv";

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub seed: u64,
    pub train_fraction: f64,
    pub folds: usize,
    pub consolidation: Consolidation,
    /// `None` skips augmentation.
    pub augmentation: Option<AugmentationPolicy>,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_fraction: 0.9,
            folds: 10,
            consolidation: Consolidation::reference(),
            augmentation: Some(AugmentationPolicy::default()),
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Propagates `seed` to every randomized stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        if let Some(p) = &mut self.augmentation {
            p.seed = seed;
        }
        self
    }
}

/// Everything a run produced; the same content is written to the work dir.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub labels: Vec<String>,
    pub scan: ScanReport,
    pub manifest: DatasetManifest,
    pub augment: Option<AugmentReport>,
    pub extract: ExtractReport,
    pub cache: FeatureCache,
    pub training: TrainOutcome<f32>,
    pub model: Model,
    pub evaluation: Evaluation,
}

/// Feature rows and class indices of `records` in a cache.
pub fn cache_rows(cache: &FeatureCache, records: &[&Record]) -> Result<(Matrix<f32>, Vec<usize>)> {
    let keys: Vec<String> = records.iter().map(|r| r.key()).collect();
    cache.select(&keys).ok_or_else(|| {
        let rows = cache.row_of();
        let missing = keys.iter().find(|k| !rows.contains_key(k.as_str())).cloned().unwrap_or_default();
        PipelineError::Invalid(format!("no features for {missing}"))
    })
}

/// Scores `records` with a head over cached features.
pub fn evaluate_head(head: &Head<f32>, cache: &FeatureCache, records: &[&Record], ks: &[usize]) -> Result<Evaluation> {
    let (x, y) = cache_rows(cache, records)?;
    let scores = head.probabilities(&x).map_err(ModelError::from)?;
    let paths: Vec<String> = records.iter().map(|r| r.path.clone()).collect();
    Ok(metrics::evaluate(&scores, &y, &paths, &cache.labels, ks)?)
}

pub fn train_on(cache: &FeatureCache, records: &[&Record], config: &TrainConfig) -> Result<TrainOutcome<f32>> {
    let (x, y) = cache_rows(cache, records)?;
    Ok(train::train_head(&x, &y, cache.labels.len(), config)?)
}

/// Runs the whole pipeline on `corpus` with `backbone` frozen, writing
/// artifacts under `work`. `previous` lends already computed features.
pub fn run_pipeline(
    corpus: &Path,
    work: &Path,
    backbone: &Model,
    config: &PipelineConfig,
    previous: Option<&FeatureCache>,
) -> Result<PipelineRun> {
    std::fs::create_dir_all(work)?;
    let scan = dataset::scan_corpus(corpus, &config.consolidation)?;
    std::fs::write(work.join(SCAN_REPORT_FILE), scan.report.to_text())?;
    let labels = scan.manifest.final_labels();
    if labels.len() < 2 {
        return Err(PipelineError::Invalid(format!("{} class(es) found; need at least 2", labels.len())));
    }
    let (manifest, _) = dataset::split(&scan.manifest, config.train_fraction, config.seed)?;
    let (mut manifest, _) = dataset::assign_folds(&manifest, config.folds, config.seed)?;
    let mut roots = DataRoots::new(corpus);
    let mut augment_report = None;
    if let Some(policy) = &config.augmentation {
        let plan = augment::plan(&manifest, policy)?;
        let out = work.join(AUGMENTED_DIR);
        let done = augment::materialize(&manifest, &plan, &roots, &out)?;
        std::fs::write(work.join(AUGMENT_REPORT_FILE), done.report.to_text())?;
        manifest = done.manifest;
        augment_report = Some(done.report);
        roots = roots.with_augmented(out);
    }
    manifest.save(work.join(MANIFEST_FILE))?;

    let records: Vec<&Record> = manifest.records.iter().filter(|r| r.split.is_some()).collect();
    let (cache, extract) = extract_features(backbone, &records, &roots, &labels, previous)?;
    if !extract.failed.is_empty() {
        return Err(PipelineError::Invalid(format!(
            "{} image(s) could not be read, first: {}",
            extract.failed.len(),
            extract.failed[0].0
        )));
    }
    cache.save(work.join(FEATURES_FILE))?;

    let train: Vec<&Record> = manifest.train().collect();
    let test: Vec<&Record> = manifest.test().collect();
    let training = train_on(&cache, &train, &config.train)?;
    let model = backbone.with_head(training.head.clone(), labels.clone())?;
    model.save(work.join(WEIGHTS_FILE))?;
    let evaluation = evaluate_head(&training.head, &cache, &test, &[1, 5])?;
    write_evaluation(work, &evaluation)?;
    Ok(PipelineRun {
        labels,
        scan: scan.report,
        manifest,
        augment: augment_report,
        extract,
        cache,
        training,
        model,
        evaluation,
    })
}

/// `metrics.json`, `metrics.txt` and `mispredictions.csv`.
pub fn write_evaluation(dir: &Path, e: &Evaluation) -> Result<()> {
    std::fs::write(dir.join(METRICS_JSON), e.metrics.to_json())?;
    let table = metrics::Metrics::table(&[("mobilenet_v2", &e.metrics)]) + "\n" + &e.metrics.per_class_text();
    std::fs::write(dir.join(METRICS_TABLE), table)?;
    std::fs::write(dir.join(MISPREDICTIONS_CSV), e.mispredictions_csv()?)?;
    Ok(())
}

/// Files a run leaves in its work dir, relative to it, sorted.
pub fn artifact_files(work: &Path) -> std::io::Result<Vec<PathBuf>> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for e in std::fs::read_dir(dir)? {
            let e = e?;
            if e.file_type()?.is_dir() {
                walk(base, &e.path(), out)?;
            } else {
                out.push(e.path().strip_prefix(base).expect("under base").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(work, work, &mut out)?;
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub augmented: usize,
    pub epochs: usize,
    pub final_loss: f64,
    pub top1: f64,
    pub top5: f64,
}

impl PipelineRun {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            classes: self.labels.len(),
            train: self.manifest.train().count(),
            test: self.manifest.test().count(),
            augmented: self.manifest.records.iter().filter(|r| !r.is_original()).count(),
            epochs: self.training.epoch_losses.len(),
            final_loss: self.training.epoch_losses.last().copied().unwrap_or(f64::NAN),
            top1: self.evaluation.metrics.top1(),
            top5: self.evaluation.metrics.top5(),
        }
    }
}
