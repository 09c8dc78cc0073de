use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::{apply, AugmentError, Plan, PlanItem, Result};
use crate::dataset::{ClassStats, DataRoots, DatasetError, DatasetManifest, Provenance, Record, Split};

pub const PLAN_JOURNAL: &str = "plan.jsonl";
pub const DONE_JOURNAL: &str = "done.jsonl";

/// Items written between journal flushes.
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AugmentReport {
    pub before: ClassStats,
    pub after: ClassStats,
}

impl AugmentReport {
    pub fn added(&self) -> usize {
        self.after.totals().augmented - self.before.totals().augmented
    }

    /// Train/test/total sizes without and with augmentation, then the
    /// per-class deltas.
    pub fn to_text(&self) -> String {
        let (b, a) = (self.before.totals(), self.after.totals());
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>20} {:>20}", "", "w/o augmentation", "w/ augmentation");
        let _ = writeln!(s, "{:<8} {:>20} {:>20}", "train", b.train(), a.train());
        let _ = writeln!(s, "{:<8} {:>20} {:>20}", "test", b.test, a.test);
        let _ = writeln!(s, "{:<8} {:>20} {:>20}", "total", b.train() + b.test, a.train() + a.test);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<24} {:>8} {:>8} {:>8}", "class", "before", "added", "after");
        for (label, after) in &self.after.classes {
            let before = self.before.get(label);
            let _ = writeln!(
                s,
                "{label:<24} {:>8} {:>8} {:>8}",
                before.train(),
                after.train() - before.train(),
                after.train()
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct Materialized {
    pub manifest: DatasetManifest,
    pub report: AugmentReport,
    /// Items already present from an earlier interrupted run.
    pub resumed: usize,
}

fn read_done(path: &Path) -> Result<BTreeSet<String>> {
    if !path.exists() {
        return Ok(BTreeSet::new());
    }
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str::<String>(l).map_err(|source| AugmentError::Journal { line: i + 1, source }))
        .collect()
}

fn render(item: &PlanItem, roots: &DataRoots, out_root: &Path) -> Result<()> {
    let src = item.source.split('/').fold(roots.corpus.clone(), |p, part| p.join(part));
    let img = image::open(&src)
        .map_err(|source| AugmentError::Image {
            path: item.source.clone(),
            source,
        })?
        .to_rgb8();
    let out = apply(&img, &item.recipe)?;
    let dest = out_root.join(&item.output);
    if let Some(dir) = dest.parent() {
        std::fs::create_dir_all(dir)?;
    }
    out.save_with_format(&dest, image::ImageFormat::Png)
        .map_err(|source| AugmentError::Image {
            path: item.output.clone(),
            source,
        })
}

/// Writes every planned image under `out_root` as PNG and returns the manifest
/// with the augmented records appended (sorted by path, after the
/// originals). `plan.jsonl` pins the plan; `done.jsonl` lists finished
/// outputs so an interrupted run picks up where it stopped.
pub fn materialize(manifest: &DatasetManifest, plan: &Plan, roots: &DataRoots, out_root: impl AsRef<Path>) -> Result<Materialized> {
    let out_root = out_root.as_ref();
    let originals: BTreeMap<&str, &Record> =
        manifest.records.iter().filter(|r| r.is_original()).map(|r| (r.path.as_str(), r)).collect();
    for it in &plan.items {
        match originals.get(it.source.as_str()) {
            Some(r) if r.split == Some(Split::Train) && r.final_label == it.final_label => {}
            _ => {
                return Err(DatasetError::Inconsistent(format!(
                    "plan source {} is not a training original of class {}",
                    it.source, it.final_label
                ))
                .into())
            }
        }
    }
    std::fs::create_dir_all(out_root)?;
    let plan_text = plan.to_jsonl();
    let plan_path = out_root.join(PLAN_JOURNAL);
    if plan_path.exists() {
        if std::fs::read_to_string(&plan_path)? != plan_text {
            return Err(AugmentError::JournalMismatch(plan_path));
        }
    } else {
        std::fs::write(&plan_path, &plan_text)?;
    }
    let done_path = out_root.join(DONE_JOURNAL);
    let done = read_done(&done_path)?;
    let pending: Vec<&PlanItem> = plan
        .items
        .iter()
        .filter(|it| !(done.contains(&it.output) && out_root.join(&it.output).is_file()))
        .collect();
    let resumed = plan.len() - pending.len();
    let mut journal = std::fs::OpenOptions::new().create(true).append(true).open(&done_path)?;
    for chunk in pending.chunks(CHUNK) {
        let results: Vec<Result<()>> = chunk.par_iter().map(|it| render(it, roots, out_root)).collect();
        for (it, r) in chunk.iter().zip(results) {
            r?;
            writeln!(journal, "{}", serde_json::to_string(&it.output).expect("string serializes"))?;
        }
        journal.flush()?;
    }

    let mut added: Vec<Record> = plan
        .items
        .iter()
        .map(|it| {
            let src = originals[it.source.as_str()];
            Record {
                path: it.output.clone(),
                raw_label: src.raw_label.clone(),
                final_label: it.final_label.clone(),
                split: Some(Split::Train),
                fold: src.fold,
                provenance: Provenance::Augmented,
                source: Some(it.source.clone()),
            }
        })
        .collect();
    added.sort_by(|a, b| a.path.cmp(&b.path));
    let mut records: Vec<Record> = manifest.records.iter().filter(|r| r.is_original()).cloned().collect();
    records.extend(manifest.records.iter().filter(|r| !r.is_original()).cloned());
    records.extend(added);
    let out = DatasetManifest::new(records);
    out.validate()?;
    Ok(Materialized {
        report: AugmentReport {
            before: manifest.stats(),
            after: out.stats(),
        },
        manifest: out,
        resumed,
    })
}

