use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelError, ModelSpec, Result};
use crate::container::{self, Entry, FORMAT_VERSION};

pub const MODEL_KIND: &str = "mobilenet_v2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMetadata {
    pub num_classes: usize,
    pub input_resolution: usize,
    pub labels: Vec<String>,
    pub bn_epsilon: f32,
    pub architecture: ModelSpec,
}

/// JSON header of a weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub format_version: u32,
    pub kind: String,
    pub metadata: WeightMetadata,
    pub entries: Vec<Entry>,
}

impl Model {
    pub fn manifest(&self) -> WeightManifest {
        let layout = self.spec.param_layout();
        WeightManifest {
            format_version: FORMAT_VERSION,
            kind: MODEL_KIND.to_string(),
            metadata: WeightMetadata {
                num_classes: self.spec.num_classes,
                input_resolution: self.spec.input_resolution,
                labels: self.labels.clone(),
                bn_epsilon: self.bn_epsilon,
                architecture: self.spec.clone(),
            },
            entries: container::layout_entries(layout.iter().map(|s| (s.name.as_str(), s.shape.as_slice()))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest()).expect("manifest serializes");
        let mut blob = Vec::new();
        for p in &self.params {
            container::push_f32s(&mut blob, p);
        }
        container::encode(&manifest, &blob)
    }

    /// Parses a weight file, validating every entry against the architecture
    /// recorded in its metadata before accepting it.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, blob) = container::decode(bytes)?;
        container::check_version(manifest)?;
        let manifest: WeightManifest = serde_json::from_slice(manifest).map_err(container::ContainerError::from)?;
        if manifest.kind != MODEL_KIND {
            return Err(ModelError::Metadata(format!("unsupported model kind `{}`", manifest.kind)));
        }
        let meta = &manifest.metadata;
        let spec = &meta.architecture;
        spec.validate()?;
        if meta.num_classes != spec.num_classes || meta.input_resolution != spec.input_resolution {
            return Err(ModelError::Metadata(
                "num_classes or input_resolution disagrees with the architecture".into(),
            ));
        }
        if meta.labels.len() != meta.num_classes {
            return Err(ModelError::LabelCount {
                labels: meta.labels.len(),
                classes: meta.num_classes,
            });
        }
        let expected: Vec<(String, Vec<usize>)> = spec.param_layout().into_iter().map(|s| (s.name, s.shape)).collect();
        container::check_layout(&manifest.entries, &expected)?;
        container::validate_entries(&manifest.entries, blob.len() as u64)?;
        let params = manifest.entries.iter().map(|e| container::read_f32s(blob, e)).collect();
        Model::from_params(spec.clone(), meta.labels.clone(), meta.bn_epsilon, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<WeightManifest> {
        std::fs::write(path, self.to_bytes())?;
        Ok(self.manifest())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
