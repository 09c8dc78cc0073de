use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AugmentationPolicy, AugmentationRecipe, Result};
use crate::dataset::{DatasetError, DatasetManifest, Split};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanItem {
    /// Path of the training original to transform.
    pub source: String,
    pub final_label: String,
    /// Position within the class, from 0.
    pub sequence: usize,
    /// Output path relative to the augmentation root.
    pub output: String,
    pub recipe: AugmentationRecipe,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Plan {
    pub items: Vec<PlanItem>,
    pub warnings: Vec<String>,
}

impl Plan {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn per_class(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for it in &self.items {
            *m.entry(it.final_label.clone()).or_default() += 1;
        }
        m
    }

    pub fn to_jsonl(&self) -> String {
        self.items
            .iter()
            .map(|it| serde_json::to_string(it).expect("plan item serializes") + "\n")
            .collect()
    }
}

/// Tops every class with fewer than `class_threshold` training originals up
/// to `target_count`, cycling over its originals in path order. The recipe
/// for sequence `i` of class `c` depends only on (seed, c, i).
pub fn plan(manifest: &DatasetManifest, policy: &AugmentationPolicy) -> Result<Plan> {
    policy.validate()?;
    if manifest.records.iter().any(|r| !r.is_original()) {
        return Err(DatasetError::Inconsistent("manifest already holds augmented records".into()).into());
    }
    let mut sources: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in &manifest.records {
        let entry = sources.entry(r.final_label.as_str()).or_default();
        if r.split == Some(Split::Train) {
            entry.push(&r.path);
        }
    }
    let mut out = Plan::default();
    for (label, mut paths) in sources {
        if paths.is_empty() {
            let w = format!("class `{label}` has no training originals; not augmented");
            log::warn!("{w}");
            out.warnings.push(w);
            continue;
        }
        if paths.len() >= policy.class_threshold {
            continue;
        }
        paths.sort_unstable();
        for i in 0..policy.target_count - paths.len() {
            let mut rng = seed::rng(policy.seed, &["augment", label, &i.to_string()]);
            out.items.push(PlanItem {
                source: paths[i % paths.len()].to_string(),
                final_label: label.to_string(),
                sequence: i,
                output: format!("{label}/aug_{i:05}.png"),
                recipe: policy.sample(&mut rng),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Record;

    fn manifest(classes: &[(&str, usize)]) -> DatasetManifest {
        let mut v = Vec::new();
        for (c, n) in classes {
            for i in 0..*n {
                let mut r = Record::original(format!("{c}/{i:04}.png"), *c, *c);
                r.split = Some(Split::Train);
                v.push(r);
            }
        }
        DatasetManifest::new(v)
    }

    #[test]
    fn tops_up_small_classes_only() {
        let p = plan(&manifest(&[("a", 40), ("b", 150)]), &AugmentationPolicy::default()).unwrap();
        assert_eq!(p.len(), 60);
        assert!(p.items.iter().all(|i| i.final_label == "a"));
        assert_eq!(p.items[40].source, "a/0000.png");
        assert_eq!(p.items[41].source, "a/0001.png");
    }

    #[test]
    fn balanced_corpus_gives_empty_plan() {
        assert!(plan(&manifest(&[("a", 100), ("b", 120)]), &AugmentationPolicy::default()).unwrap().is_empty());
    }

    #[test]
    fn plan_is_a_pure_function() {
        let m = manifest(&[("a", 7), ("b", 3)]);
        let pol = AugmentationPolicy {
            class_threshold: 10,
            target_count: 12,
            seed: 4,
            ..Default::default()
        };
        let a = plan(&m, &pol).unwrap();
        assert_eq!(a, plan(&m, &pol).unwrap());
        assert_eq!(a.per_class()["a"], 5);
        assert_eq!(a.per_class()["b"], 9);
        let b = plan(&m, &pol.clone().with_seed(5)).unwrap();
        assert_ne!(a.items[0].recipe, b.items[0].recipe);
        // adding a class leaves the other recipes alone
        let c = plan(&manifest(&[("a", 7), ("b", 3), ("c", 2)]), &pol).unwrap();
        assert_eq!(&c.items[..a.len()], &a.items[..]);
    }

    #[test]
    fn test_records_are_never_sources() {
        let mut m = manifest(&[("a", 5)]);
        m.records[0].split = Some(Split::Test);
        let p = plan(&m, &AugmentationPolicy::default()).unwrap();
        assert_eq!(p.len(), 96);
        assert!(p.items.iter().all(|i| i.source != "a/0000.png"));
    }
}
