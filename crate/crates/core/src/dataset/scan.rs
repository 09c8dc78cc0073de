use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::{ClassTaxonomy, Consolidation, DatasetError, DatasetManifest, Record, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ScanReport {
    pub files_seen: usize,
    pub accepted: usize,
    /// (relative path, reason)
    pub rejected: Vec<(String, String)>,
    pub empty_classes: Vec<String>,
}

impl ScanReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "files seen: {}", self.files_seen);
        let _ = writeln!(s, "accepted: {}", self.accepted);
        let _ = writeln!(s, "rejected: {}", self.rejected.len());
        for (p, why) in &self.rejected {
            let _ = writeln!(s, "  {p}: {why}");
        }
        for c in &self.empty_classes {
            let _ = writeln!(s, "warning: class directory `{c}` holds no images");
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct Scan {
    pub manifest: DatasetManifest,
    pub taxonomy: ClassTaxonomy,
    pub report: ScanReport,
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::fs::DirEntry>> {
    let mut v: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    v.sort_by_key(|e| e.file_name());
    Ok(v)
}

fn check_image(path: &Path) -> std::result::Result<(), String> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?;
    match reader.format() {
        Some(image::ImageFormat::Png | image::ImageFormat::Jpeg) => {}
        Some(f) => return Err(format!("unsupported format {f:?}")),
        None => return Err("not an image".into()),
    }
    let img = reader.decode().map_err(|e| e.to_string())?;
    if img.width() == 0 || img.height() == 0 {
        return Err("zero-sized image".into());
    }
    Ok(())
}

/// Reads `<root>/<raw-label>/<image>`; every image is decoded once to make
/// sure it is usable. Hidden entries are ignored.
pub fn scan_corpus(root: impl AsRef<Path>, consolidation: &Consolidation) -> Result<Scan> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(DatasetError::MissingRoot(root.to_path_buf()));
    }
    let mut candidates = Vec::new();
    let mut raw_labels = Vec::new();
    let mut report = ScanReport::default();
    for class in sorted_entries(root)? {
        let name = class.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') || !class.file_type()?.is_dir() {
            continue;
        }
        let before = candidates.len();
        for f in sorted_entries(&class.path())? {
            let file = f.file_name().to_string_lossy().into_owned();
            if file.starts_with('.') || !f.file_type()?.is_file() {
                continue;
            }
            candidates.push((name.clone(), format!("{name}/{file}"), f.path()));
        }
        if candidates.len() == before {
            log::warn!("class directory `{name}` is empty");
            report.empty_classes.push(name.clone());
        }
        raw_labels.push(name);
    }
    report.files_seen = candidates.len();
    let checks: Vec<_> = candidates.par_iter().map(|(_, _, p)| check_image(p)).collect();
    let mut records = Vec::new();
    for ((raw, rel, _), check) in candidates.into_iter().zip(checks) {
        match check {
            Ok(()) => {
                let fin = consolidation.consolidate(&raw);
                records.push(Record::original(rel, raw, fin));
            }
            Err(why) => report.rejected.push((rel, why)),
        }
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    report.accepted = records.len();
    Ok(Scan {
        manifest: DatasetManifest::new(records),
        taxonomy: ClassTaxonomy::new(raw_labels, consolidation.clone()),
        report,
    })
}
