//! Corpus ingestion, class consolidation, stratified splitting and folds.
//!
//! Record paths are relative, with `/` separators: originals relative to the
//! corpus root, augmented images relative to the augmentation output root.
//! [`DataRoots`] turns them back into file paths.

mod scan;
mod split;
mod taxonomy;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use scan::{scan_corpus, Scan, ScanReport};
pub use split::{assign_folds, split, test_count};
pub use taxonomy::{ClassTaxonomy, Consolidation, DEFAULT_CONSOLIDATION, REFERENCE_RAW_LABELS};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("consolidation config line {line}: {reason}")]
    Config { line: usize, reason: String },
    #[error("corpus root {0} is not a directory")]
    MissingRoot(PathBuf),
    #[error("train fraction {0} is outside (0, 1)")]
    TrainFraction(f64),
    #[error("k = {0}; at least 2 folds are needed")]
    FoldCount(usize),
    #[error("manifest line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("manifest is inconsistent: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub path: String,
    pub raw_label: String,
    pub final_label: String,
    pub split: Option<Split>,
    pub fold: Option<usize>,
    pub provenance: Provenance,
    /// Path of the original an augmented record was derived from.
    pub source: Option<String>,
}

impl Record {
    pub fn original(path: impl Into<String>, raw_label: impl Into<String>, final_label: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            raw_label: raw_label.into(),
            final_label: final_label.into(),
            split: None,
            fold: None,
            provenance: Provenance::Original,
            source: None,
        }
    }

    pub fn is_original(&self) -> bool {
        self.provenance == Provenance::Original
    }

    /// Unique across both roots.
    pub fn key(&self) -> String {
        match self.provenance {
            Provenance::Original => format!("original:{}", self.path),
            Provenance::Augmented => format!("augmented:{}", self.path),
        }
    }
}

/// Where record paths point.
#[derive(Debug, Clone)]
pub struct DataRoots {
    pub corpus: PathBuf,
    pub augmented: Option<PathBuf>,
}

impl DataRoots {
    pub fn new(corpus: impl Into<PathBuf>) -> Self {
        Self {
            corpus: corpus.into(),
            augmented: None,
        }
    }

    pub fn with_augmented(mut self, root: impl Into<PathBuf>) -> Self {
        self.augmented = Some(root.into());
        self
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        let root = match record.provenance {
            Provenance::Original => &self.corpus,
            Provenance::Augmented => self.augmented.as_ref().unwrap_or(&self.corpus),
        };
        record.path.split('/').fold(root.clone(), |p, part| p.join(part))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn new(records: Vec<Record>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted distinct final labels.
    pub fn final_labels(&self) -> Vec<String> {
        let mut v: Vec<String> = self.records.iter().map(|r| r.final_label.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn train(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|r| r.split == Some(Split::Train))
    }

    pub fn test(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|r| r.split == Some(Split::Test))
    }

    /// Checks the structural rules: unique keys, augmented records in train
    /// with an existing original source, folds only on training records.
    pub fn validate(&self) -> Result<()> {
        let mut keys = std::collections::BTreeSet::new();
        let originals: BTreeMap<&str, &Record> =
            self.records.iter().filter(|r| r.is_original()).map(|r| (r.path.as_str(), r)).collect();
        for r in &self.records {
            if !keys.insert(r.key()) {
                return Err(DatasetError::Inconsistent(format!("duplicate record {}", r.key())));
            }
            if r.fold.is_some() && r.split != Some(Split::Train) {
                return Err(DatasetError::Inconsistent(format!("{} has a fold but is not in train", r.path)));
            }
            if r.provenance == Provenance::Augmented {
                if r.split != Some(Split::Train) {
                    return Err(DatasetError::Inconsistent(format!("augmented {} outside train", r.path)));
                }
                let src = r.source.as_deref().and_then(|s| originals.get(s));
                match src {
                    Some(s) if s.split == Some(Split::Train) && s.final_label == r.final_label => {}
                    _ => {
                        return Err(DatasetError::Inconsistent(format!(
                            "augmented {} lacks a training original of the same class",
                            r.path
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|source| DatasetError::Parse { line: i + 1, source }))
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    pub fn stats(&self) -> ClassStats {
        ClassStats::of(self)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub original: usize,
    pub augmented: usize,
    pub train_original: usize,
    pub test: usize,
}

impl ClassCounts {
    pub fn train(&self) -> usize {
        self.train_original + self.augmented
    }

    pub fn total(&self) -> usize {
        self.original + self.augmented
    }
}

/// Per final label counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    pub classes: BTreeMap<String, ClassCounts>,
}

impl ClassStats {
    pub fn of(manifest: &DatasetManifest) -> Self {
        let mut classes: BTreeMap<String, ClassCounts> = BTreeMap::new();
        for r in &manifest.records {
            let c = classes.entry(r.final_label.clone()).or_default();
            match r.provenance {
                Provenance::Original => {
                    c.original += 1;
                    match r.split {
                        Some(Split::Train) => c.train_original += 1,
                        Some(Split::Test) => c.test += 1,
                        None => {}
                    }
                }
                Provenance::Augmented => c.augmented += 1,
            }
        }
        Self { classes }
    }

    pub fn totals(&self) -> ClassCounts {
        self.classes.values().fold(ClassCounts::default(), |a, c| ClassCounts {
            original: a.original + c.original,
            augmented: a.augmented + c.augmented,
            train_original: a.train_original + c.train_original,
            test: a.test + c.test,
        })
    }

    pub fn get(&self, label: &str) -> ClassCounts {
        self.classes.get(label).copied().unwrap_or_default()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8} {:>6} {:>9} {:>6}", "class", "original", "train", "augmented", "test");
        for (label, c) in &self.classes {
            let _ = writeln!(
                s,
                "{label:<24} {:>8} {:>6} {:>9} {:>6}",
                c.original, c.train_original, c.augmented, c.test
            );
        }
        let t = self.totals();
        let _ = writeln!(
            s,
            "{:<24} {:>8} {:>6} {:>9} {:>6}",
            "total", t.original, t.train_original, t.augmented, t.test
        );
        s
    }
}
