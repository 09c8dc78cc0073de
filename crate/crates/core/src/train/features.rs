use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{self, ContainerError, Entry, FORMAT_VERSION};
use crate::dataset::{DataRoots, Record};
use crate::model::{preprocess, Model, ModelError};
use crate::tensor::{Matrix, Tensor};

pub const FEATURE_CACHE_KIND: &str = "feature_cache";

/// Images per backbone call during extraction.
const BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureItem {
    /// [`Record::key`] of the sample.
    pub key: String,
    /// SHA-256 of the image file bytes.
    pub content_hash: String,
    pub label: usize,
}

/// Pooled backbone features, one row per sample, plus the class index of
/// each sample in `labels`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    /// Identifies the backbone and input resolution the rows came from.
    pub backbone: String,
    pub labels: Vec<String>,
    pub items: Vec<FeatureItem>,
    pub features: Matrix<f32>,
}

#[derive(Serialize, Deserialize)]
struct CacheManifest {
    format_version: u32,
    kind: String,
    backbone: String,
    labels: Vec<String>,
    items: Vec<FeatureItem>,
    entries: Vec<Entry>,
}

impl FeatureCache {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    pub fn row_of(&self) -> BTreeMap<&str, usize> {
        self.items.iter().enumerate().map(|(i, it)| (it.key.as_str(), i)).collect()
    }

    /// Rows for `keys`, in that order; `None` if any key is missing.
    pub fn select(&self, keys: &[String]) -> Option<(Matrix<f32>, Vec<usize>)> {
        let rows = self.row_of();
        let idx: Vec<usize> = keys.iter().map(|k| rows.get(k.as_str()).copied()).collect::<Option<_>>()?;
        let labels = idx.iter().map(|&i| self.items[i].label).collect();
        Some((self.features.select_rows(&idx), labels))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let shape = [self.features.rows(), self.features.cols()];
        let manifest = CacheManifest {
            format_version: FORMAT_VERSION,
            kind: FEATURE_CACHE_KIND.into(),
            backbone: self.backbone.clone(),
            labels: self.labels.clone(),
            items: self.items.clone(),
            entries: container::layout_entries([("features", &shape[..])]),
        };
        let mut blob = Vec::new();
        container::push_f32s(&mut blob, self.features.data());
        container::encode(&serde_json::to_vec(&manifest).expect("manifest serializes"), &blob)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let (manifest, blob) = container::decode(bytes)?;
        container::check_version(manifest)?;
        let m: CacheManifest = serde_json::from_slice(manifest).map_err(ContainerError::from)?;
        if m.kind != FEATURE_CACHE_KIND {
            return Err(ModelError::Metadata(format!("expected a feature cache, found `{}`", m.kind)));
        }
        let dim = m.entries.first().and_then(|e| e.shape.get(1).copied()).unwrap_or(0);
        container::check_layout(&m.entries, &[("features".into(), vec![m.items.len(), dim])])?;
        container::validate_entries(&m.entries, blob.len() as u64)?;
        if let Some(it) = m.items.iter().find(|it| it.label >= m.labels.len()) {
            return Err(ModelError::Metadata(format!("{} has label index {}", it.key, it.label)));
        }
        let data = container::read_f32s(blob, &m.entries[0]);
        Ok(Self {
            backbone: m.backbone,
            labels: m.labels,
            items: m.items,
            features: Matrix::from_vec(m.entries[0].shape[0], dim, data)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExtractReport {
    pub computed: usize,
    pub reused: usize,
    /// (record path, reason)
    pub failed: Vec<(String, String)>,
}

/// Identifier of what feature rows depend on: backbone weights and input
/// resolution.
pub fn backbone_id(model: &Model) -> String {
    format!("{}@{}", model.backbone_digest(), model.spec().input_resolution)
}

enum Loaded {
    Reuse(Vec<f32>),
    Compute(Tensor<f32>),
}

/// Runs the frozen backbone over `records`. Rows whose image bytes hash to
/// an entry of `previous` (same backbone) are copied instead of recomputed.
/// Unreadable images are skipped and listed in the report. Labels must
/// appear in `labels`.
pub fn extract_features(
    model: &Model,
    records: &[&Record],
    roots: &DataRoots,
    labels: &[String],
    previous: Option<&FeatureCache>,
) -> Result<(FeatureCache, ExtractReport), ModelError> {
    let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    for r in records {
        if !index.contains_key(r.final_label.as_str()) {
            return Err(ModelError::Metadata(format!(
                "{} has label `{}`, which is not one of the {} classes",
                r.path,
                r.final_label,
                labels.len()
            )));
        }
    }
    let backbone = backbone_id(model);
    let mut known: BTreeMap<&str, &[f32]> = BTreeMap::new();
    if let Some(prev) = previous.filter(|p| p.backbone == backbone) {
        for (i, it) in prev.items.iter().enumerate() {
            known.entry(it.content_hash.as_str()).or_insert(prev.features.row(i));
        }
    }
    let res = model.spec().input_resolution;
    let loaded: Vec<Result<(String, Loaded), String>> = records
        .par_iter()
        .map(|r| {
            let bytes = std::fs::read(roots.resolve(r)).map_err(|e| e.to_string())?;
            let hash = hex::encode(Sha256::digest(&bytes));
            if let Some(row) = known.get(hash.as_str()) {
                return Ok((hash, Loaded::Reuse(row.to_vec())));
            }
            let img = crate::model::decode_image(&bytes).map_err(|e| e.to_string())?;
            let x = preprocess(&img, res).map_err(|e| e.to_string())?;
            Ok((hash, Loaded::Compute(x)))
        })
        .collect();

    let mut report = ExtractReport::default();
    let mut items = Vec::new();
    let mut rows: Vec<Option<Vec<f32>>> = Vec::new();
    let mut pending: Vec<(usize, Tensor<f32>)> = Vec::new();
    for (r, l) in records.iter().zip(loaded) {
        match l {
            Err(why) => report.failed.push((r.path.clone(), why)),
            Ok((hash, what)) => {
                items.push(FeatureItem {
                    key: r.key(),
                    content_hash: hash,
                    label: index[r.final_label.as_str()],
                });
                match what {
                    Loaded::Reuse(v) => {
                        report.reused += 1;
                        rows.push(Some(v));
                    }
                    Loaded::Compute(x) => {
                        report.computed += 1;
                        pending.push((rows.len(), x));
                        rows.push(None);
                    }
                }
            }
        }
    }
    let computed: Vec<Matrix<f32>> = pending
        .par_chunks(BATCH)
        .map(|chunk| {
            let xs: Vec<Tensor<f32>> = chunk.iter().map(|(_, x)| x.clone()).collect();
            model.features(&Tensor::stack(&xs)?)
        })
        .collect::<Result<_, ModelError>>()?;
    for (chunk, feats) in pending.chunks(BATCH).zip(&computed) {
        for (k, (slot, _)) in chunk.iter().enumerate() {
            rows[*slot] = Some(feats.row(k).to_vec());
        }
    }
    let dim = model.spec().head_width;
    let data: Vec<f32> = rows.into_iter().flat_map(|r| r.expect("every row filled")).collect();
    for (p, why) in &report.failed {
        log::warn!("feature extraction skipped {p}: {why}");
    }
    Ok((
        FeatureCache {
            backbone,
            labels: labels.to_vec(),
            features: Matrix::from_vec(items.len(), dim, data)?,
            items,
        },
        report,
    ))
}
