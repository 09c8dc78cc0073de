//! Command-line surface. [`run`] executes a parsed command and returns what
//! it would print.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use plate_core::augment::{self, AugmentationPolicy};
use plate_core::dataset::{self, ClassTaxonomy, Consolidation, DataRoots, DatasetManifest, Record};
use plate_core::metrics::Metrics;
use plate_core::model::placeholder_labels;
use plate_core::pipeline::{self, AblationCell, PipelineConfig};
use plate_core::synth::{self, SynthSpec};
use plate_core::train::{extract_features, FeatureCache, TrainConfig};
use plate_core::{Model, ModelSpec};
use serde_json::json;

use crate::config::KvConfig;
use crate::service::{self, LoadedModel, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "plate", version, about = "Food photo classifier and dataset toolkit")]
pub struct Cli {
    /// Master seed for every randomized step.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Settings file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Manifest (JSON lines).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Root the original image paths are relative to.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Root of augmented images, when the manifest has any.
    #[arg(long)]
    pub augmented: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic image corpus (the 27-label reference layout by default).
    Synth {
        out: PathBuf,
        /// Distinct classes instead, e.g. `apple=20,pear=35`.
        #[arg(long)]
        classes: Option<String>,
        #[arg(long, default_value_t = 64)]
        size: u32,
    },
    /// Write a weight file with seeded random weights.
    Init {
        out: PathBuf,
        /// Placeholder labels instead of the 23 reference classes.
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Index a corpus, consolidate labels, split and assign folds.
    Scan {
        corpus: PathBuf,
        /// Manifest to write.
        #[arg(long)]
        out: PathBuf,
        /// Merge file (`raw -> final` lines); the reference merges by default.
        #[arg(long)]
        consolidation: Option<PathBuf>,
        /// Keep every raw label as its own class.
        #[arg(long)]
        no_consolidation: bool,
        #[arg(long)]
        train_fraction: Option<f64>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Top up small classes with augmented copies.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Directory for the images, journals, manifest and report.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<usize>,
        #[arg(long)]
        target: Option<usize>,
    },
    /// Train a classifier head over a frozen backbone.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Backbone weight file.
        #[arg(long)]
        weights: PathBuf,
        /// Weight file to write.
        #[arg(long)]
        out: PathBuf,
        /// Feature cache to reuse and update.
        #[arg(long)]
        features: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score a model on the test split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        weights: PathBuf,
        /// Directory for metrics.json, metrics.txt and mispredictions.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// k-fold cross-validation of the head over the training split.
    Crossval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        folds: Option<usize>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Compare consolidation and augmentation settings.
    Ablate {
        corpus: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        work: PathBuf,
        /// `consolidate,augment` pairs such as `on,off`; the reference grid by default.
        #[arg(long = "cell")]
        cells: Vec<String>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Run scan through eval in one go.
    Pipeline {
        corpus: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        work: PathBuf,
        #[arg(long)]
        no_augment: bool,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Print the top-k classes of one image.
    Classify {
        image: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Serve classifications over HTTP.
    Serve {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        bind: Option<std::net::SocketAddr>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        max_upload_bytes: Option<usize>,
        #[arg(long)]
        timeout_ms: Option<u64>,
    },
}

struct Ctx {
    cfg: KvConfig,
    seed: u64,
    json: bool,
}

impl Ctx {
    fn emit(&self, text: String, value: serde_json::Value) -> String {
        if self.json {
            serde_json::to_string_pretty(&value).expect("json") + "\n"
        } else {
            text
        }
    }

    fn train_config(&self, a: &TrainArgs) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let c = TrainConfig {
            epochs: self.cfg.pick(a.epochs, "epochs", d.epochs)?,
            batch_size: self.cfg.pick(a.batch_size, "batch_size", d.batch_size)?,
            head_lr: self.cfg.pick(a.lr, "head_lr", d.head_lr)?,
            patience: self.cfg.pick(None, "patience", d.patience)?,
            min_improvement: self.cfg.pick(None, "min_improvement", d.min_improvement)?,
            seed: self.seed,
            ..d
        };
        c.validate()?;
        Ok(c)
    }

    fn policy(&self, threshold: Option<usize>, target: Option<usize>) -> Result<AugmentationPolicy> {
        let d = AugmentationPolicy::default();
        let class_threshold = self.cfg.pick(threshold, "class_threshold", d.class_threshold)?;
        let p = AugmentationPolicy {
            class_threshold,
            target_count: self.cfg.pick(target, "target_count", class_threshold)?,
            flip_probability: self.cfg.pick(None, "flip_probability", d.flip_probability)?,
            max_rotation_deg: self.cfg.pick(None, "max_rotation_deg", d.max_rotation_deg)?,
            max_translation: self.cfg.pick(None, "max_translation", d.max_translation)?,
            seed: self.seed,
            ..d
        };
        p.validate()?;
        Ok(p)
    }

    fn consolidation(&self, file: Option<&Path>) -> Result<Consolidation> {
        let file = match file {
            Some(f) => Some(f.to_path_buf()),
            None => self.cfg.get::<PathBuf>("consolidation")?,
        };
        match file {
            Some(f) => Consolidation::load(&f).with_context(|| format!("consolidation file {}", f.display())),
            None => Ok(Consolidation::reference()),
        }
    }

    fn weights(&self, flag: Option<PathBuf>) -> Result<PathBuf> {
        match flag.or(self.cfg.get("weights")?) {
            Some(w) => Ok(w),
            None => bail!("no weight file given (--weights or `weights =` in the config)"),
        }
    }
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load_manifest(data: &DataArgs) -> Result<(DatasetManifest, DataRoots)> {
    let m = DatasetManifest::load(&data.manifest).with_context(|| format!("reading {}", data.manifest.display()))?;
    let mut roots = DataRoots::new(&data.corpus);
    if let Some(a) = &data.augmented {
        roots = roots.with_augmented(a);
    } else if m.records.iter().any(|r| !r.is_original()) {
        bail!("the manifest lists augmented images; pass --augmented <dir>");
    }
    Ok((m, roots))
}

/// Features of the manifest's split records, failing on unreadable images.
fn features(model: &Model, records: &[&Record], roots: &DataRoots, labels: &[String], cache: Option<&Path>) -> Result<FeatureCache> {
    let previous = match cache {
        Some(p) if p.exists() => Some(FeatureCache::load(p).with_context(|| format!("reading {}", p.display()))?),
        _ => None,
    };
    let (fc, report) = extract_features(model, records, roots, labels, previous.as_ref())?;
    if let Some((path, why)) = report.failed.first() {
        bail!("{} image(s) unreadable, first {path}: {why}", report.failed.len());
    }
    if let Some(p) = cache {
        fc.save(p)?;
    }
    Ok(fc)
}

fn parse_classes(s: &str) -> Result<Vec<(String, usize)>> {
    s.split(',')
        .map(|part| {
            let (l, n) = part.split_once('=').with_context(|| format!("`{part}` is not label=count"))?;
            Ok((l.trim().to_string(), n.trim().parse().with_context(|| format!("count in `{part}`"))?))
        })
        .collect()
}

/// Executes a command; the returned text goes to stdout.
pub fn run(cli: Cli) -> Result<String> {
    let cfg = match &cli.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    let seed = cfg.pick(cli.seed, "seed", 0u64)?;
    let ctx = Ctx { cfg, seed, json: cli.json };
    match cli.command {
        Command::Synth { out, classes, size } => {
            let spec = match classes {
                Some(c) => {
                    let owned = parse_classes(&c)?;
                    let counts: Vec<(&str, usize)> = owned.iter().map(|(l, n)| (l.as_str(), *n)).collect();
                    SynthSpec::distinct(&counts, size, seed)
                }
                None => SynthSpec { size, ..SynthSpec::reference(seed) },
            };
            let n = synth::generate(&out, &spec)?;
            Ok(ctx.emit(
                format!("wrote {n} images in {} classes to {}\n", spec.classes.len(), out.display()),
                json!({ "images": n, "classes": spec.classes.len() }),
            ))
        }
        Command::Init { out, classes, resolution } => {
            let labels = match classes {
                Some(n) => placeholder_labels(n),
                None => ClassTaxonomy::reference().final_labels(),
            };
            let res = ctx.cfg.pick(resolution, "resolution", 224usize)?;
            let model = Model::build(ModelSpec::mobilenet_v2(labels.len()).with_resolution(res), labels, seed)?;
            model.save(&out)?;
            let bytes = std::fs::metadata(&out)?.len();
            Ok(ctx.emit(
                format!("wrote {} ({} classes, {res} px, {bytes} bytes)\n", out.display(), model.num_classes()),
                json!({ "classes": model.num_classes(), "resolution": res, "bytes": bytes }),
            ))
        }
        Command::Scan {
            corpus,
            out,
            consolidation,
            no_consolidation,
            train_fraction,
            folds,
        } => {
            let cons = if no_consolidation {
                Consolidation::identity()
            } else {
                ctx.consolidation(consolidation.as_deref())?
            };
            let scan = dataset::scan_corpus(&corpus, &cons)?;
            let fraction = ctx.cfg.pick(train_fraction, "train_fraction", 0.9)?;
            let k = ctx.cfg.pick(folds, "folds", 10usize)?;
            let (m, mut warnings) = dataset::split(&scan.manifest, fraction, seed)?;
            let (m, w) = dataset::assign_folds(&m, k, seed)?;
            warnings.extend(w);
            m.save(&out)?;
            let stats = m.stats();
            let mut text = scan.report.to_text() + "\n" + &stats.to_text();
            for w in &warnings {
                text += &format!("warning: {w}\n");
            }
            let t = stats.totals();
            Ok(ctx.emit(
                text,
                json!({
                    "records": m.len(),
                    "classes": m.final_labels(),
                    "train": t.train_original,
                    "test": t.test,
                    "rejected": scan.report.rejected,
                    "empty_classes": scan.report.empty_classes,
                    "warnings": warnings,
                }),
            ))
        }
        Command::Augment {
            manifest,
            corpus,
            out,
            threshold,
            target,
        } => {
            let m = DatasetManifest::load(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
            let policy = ctx.policy(threshold, target)?;
            let plan = augment::plan(&m, &policy)?;
            let done = augment::materialize(&m, &plan, &DataRoots::new(&corpus), &out)?;
            done.manifest.save(out.join(pipeline::MANIFEST_FILE))?;
            let text = done.report.to_text();
            std::fs::write(out.join(pipeline::AUGMENT_REPORT_FILE), &text)?;
            let mut shown = text.clone();
            for w in &plan.warnings {
                shown += &format!("warning: {w}\n");
            }
            if done.resumed > 0 {
                shown += &format!("resumed: {} image(s) already present\n", done.resumed);
            }
            Ok(ctx.emit(
                shown,
                json!({
                    "added": done.report.added(),
                    "resumed": done.resumed,
                    "before": done.report.before,
                    "after": done.report.after,
                    "manifest": out.join(pipeline::MANIFEST_FILE),
                }),
            ))
        }
        Command::Train {
            data,
            weights,
            out,
            features: cache,
            train: targs,
        } => {
            let config = ctx.train_config(&targs)?;
            let (m, roots) = load_manifest(&data)?;
            let backbone = load_model(&weights)?;
            let labels = m.final_labels();
            let records: Vec<&Record> = m.records.iter().filter(|r| r.split.is_some()).collect();
            let fc = features(&backbone, &records, &roots, &labels, cache.as_deref())?;
            let train: Vec<&Record> = m.train().collect();
            let test: Vec<&Record> = m.test().collect();
            let outcome = pipeline::train_on(&fc, &train, &config)?;
            let model = backbone.with_head(outcome.head.clone(), labels.clone())?;
            model.save(&out)?;
            let eval = if test.is_empty() {
                None
            } else {
                Some(pipeline::evaluate_head(&outcome.head, &fc, &test, &[1, 5])?)
            };
            let mut text = format!(
                "trained {} classes on {} samples for {} epoch(s), final loss {:.4}{}\nwrote {}\n",
                labels.len(),
                train.len(),
                outcome.epoch_losses.len(),
                outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
                if outcome.stopped_early { " (early stop)" } else { "" },
                out.display()
            );
            if let Some(e) = &eval {
                text += &Metrics::table(&[("test", &e.metrics)]);
            }
            Ok(ctx.emit(
                text,
                json!({
                    "classes": labels,
                    "train_samples": train.len(),
                    "epoch_losses": outcome.epoch_losses,
                    "stopped_early": outcome.stopped_early,
                    "test": eval.as_ref().map(|e| json!({ "top1": e.metrics.top1(), "top5": e.metrics.top5() })),
                }),
            ))
        }
        Command::Eval { data, weights, out } => {
            let (m, roots) = load_manifest(&data)?;
            let model = load_model(&weights)?;
            let test: Vec<&Record> = m.test().collect();
            if test.is_empty() {
                bail!("the manifest has no test records");
            }
            let fc = features(&model, &test, &roots, model.labels(), None)?;
            let e = pipeline::evaluate_head(model.head(), &fc, &test, &[1, 5])?;
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir)?;
                pipeline::write_evaluation(dir, &e)?;
            }
            let text = Metrics::table(&[("mobilenet_v2", &e.metrics)]) + "\n" + &e.metrics.per_class_text();
            Ok(ctx.emit(text, serde_json::from_str(&e.metrics.to_json())?))
        }
        Command::Crossval {
            data,
            weights,
            folds,
            train: targs,
        } => {
            let config = ctx.train_config(&targs)?;
            let (m, roots) = load_manifest(&data)?;
            let model = load_model(&weights)?;
            let k = ctx.cfg.pick(folds, "folds", 10usize)?;
            let labels = m.final_labels();
            let train: Vec<&Record> = m.train().collect();
            let fc = features(&model, &train, &roots, &labels, None)?;
            let report = pipeline::cross_validate(&m, &fc, &config, k)?;
            Ok(ctx.emit(report.to_text(), serde_json::to_value(&report)?))
        }
        Command::Ablate {
            corpus,
            weights,
            work,
            cells,
            train: targs,
        } => {
            let grid: Vec<AblationCell> = if cells.is_empty() {
                AblationCell::REFERENCE_GRID.to_vec()
            } else {
                cells
                    .iter()
                    .map(|c| AblationCell::parse(c).with_context(|| format!("bad cell `{c}`, expected e.g. on,off")))
                    .collect::<Result<_>>()?
            };
            let base = pipeline_config(&ctx, &targs, false)?;
            let backbone = load_model(&weights)?;
            let report = pipeline::run_ablation(&corpus, &work, &backbone, &base, &grid)?;
            Ok(ctx.emit(report.to_text(), serde_json::to_value(&report)?))
        }
        Command::Pipeline {
            corpus,
            weights,
            work,
            no_augment,
            train: targs,
        } => {
            let config = pipeline_config(&ctx, &targs, no_augment)?;
            let backbone = load_model(&weights)?;
            let previous = work.join(pipeline::FEATURES_FILE);
            let previous = if previous.exists() { Some(FeatureCache::load(&previous)?) } else { None };
            let run = pipeline::run_pipeline(&corpus, &work, &backbone, &config, previous.as_ref())?;
            let s = run.summary();
            let text = format!(
                "{} classes, {} train ({} augmented), {} test, {} epoch(s)\n{}",
                s.classes,
                s.train,
                s.augmented,
                s.test,
                s.epochs,
                Metrics::table(&[("mobilenet_v2", &run.evaluation.metrics)])
            );
            Ok(ctx.emit(text, serde_json::to_value(&s)?))
        }
        Command::Classify { image, weights, k } => {
            let loaded = LoadedModel::load(&ctx.weights(weights)?)?;
            let k = ctx.cfg.pick(k, "k", 5usize)?;
            let bytes = std::fs::read(&image).with_context(|| format!("reading {}", image.display()))?;
            let r = loaded.classify(&bytes, k)?;
            let text: String = r.predictions.iter().map(|p| format!("{} {}\n", p.label, p.probability)).collect();
            Ok(ctx.emit(text, serde_json::to_value(&r)?))
        }
        Command::Serve {
            weights,
            bind,
            k,
            max_upload_bytes,
            timeout_ms,
        } => {
            let d = ServiceConfig::new(ctx.weights(weights)?);
            let config = ServiceConfig {
                bind: ctx.cfg.pick(bind, "bind", d.bind)?,
                default_k: ctx.cfg.pick(k, "k", d.default_k)?,
                max_upload_bytes: ctx.cfg.pick(max_upload_bytes, "max_upload_bytes", d.max_upload_bytes)?,
                timeout: Duration::from_millis(ctx.cfg.pick(timeout_ms, "timeout_ms", d.timeout.as_millis() as u64)?),
                ..d
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(config))?;
            Ok(String::new())
        }
    }
}

fn pipeline_config(ctx: &Ctx, targs: &TrainArgs, no_augment: bool) -> Result<PipelineConfig> {
    let d = PipelineConfig::default();
    Ok(PipelineConfig {
        seed: ctx.seed,
        train_fraction: ctx.cfg.pick(None, "train_fraction", d.train_fraction)?,
        folds: ctx.cfg.pick(None, "folds", d.folds)?,
        consolidation: ctx.consolidation(None)?,
        augmentation: if no_augment { None } else { Some(ctx.policy(None, None)?) },
        train: ctx.train_config(targs)?,
    })
}
