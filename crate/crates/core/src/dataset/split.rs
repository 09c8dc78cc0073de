use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{DatasetError, DatasetManifest, Result, Split};
use crate::seed;

/// Test samples drawn from a class of `n` originals: `n - round(n·f)`, kept
/// within `1..=n-1` so both sides are non-empty. Classes under 2 samples stay
/// entirely in train.
pub fn test_count(n: usize, train_fraction: f64) -> usize {
    if n < 2 {
        return 0;
    }
    let train = (n as f64 * train_fraction).round() as usize;
    n.saturating_sub(train).clamp(1, n - 1)
}

/// Record indices of the originals of each final label, in path order.
fn originals_by_class(m: &DatasetManifest, filter: impl Fn(&super::Record) -> bool) -> BTreeMap<String, Vec<usize>> {
    let mut by: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in m.records.iter().enumerate() {
        if r.is_original() && filter(r) {
            by.entry(r.final_label.clone()).or_default().push(i);
        }
    }
    for idx in by.values_mut() {
        idx.sort_by(|&a, &b| m.records[a].path.cmp(&m.records[b].path));
    }
    by
}

/// Stratified train/test split of the originals. Returns the new manifest
/// and warnings. Existing split and fold assignments are discarded.
pub fn split(manifest: &DatasetManifest, train_fraction: f64, seed: u64) -> Result<(DatasetManifest, Vec<String>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::TrainFraction(train_fraction));
    }
    if manifest.records.iter().any(|r| !r.is_original()) {
        return Err(DatasetError::Inconsistent(
            "split expects originals only; augment after splitting".into(),
        ));
    }
    let mut out = manifest.clone();
    let mut warnings = Vec::new();
    for r in &mut out.records {
        r.split = Some(Split::Train);
        r.fold = None;
    }
    for (label, mut idx) in originals_by_class(manifest, |_| true) {
        if idx.len() < 2 {
            warnings.push(format!("class `{label}` has {} sample(s); all kept in train", idx.len()));
            continue;
        }
        let n_test = test_count(idx.len(), train_fraction);
        idx.shuffle(&mut seed::rng(seed, &["split", &label]));
        for &i in &idx[..n_test] {
            out.records[i].split = Some(Split::Test);
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((out, warnings))
}

/// Stratified k-fold assignment over training originals. Within a class,
/// fold sizes differ by at most one; the starting fold rotates from class to
/// class so global sizes stay balanced too. Augmented records take the fold
/// of their source.
pub fn assign_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<(DatasetManifest, Vec<String>)> {
    if k < 2 {
        return Err(DatasetError::FoldCount(k));
    }
    let mut out = manifest.clone();
    let mut warnings = Vec::new();
    for r in &mut out.records {
        r.fold = None;
    }
    let mut offset = 0;
    for (label, mut idx) in originals_by_class(manifest, |r| r.split == Some(Split::Train)) {
        if idx.len() < k {
            warnings.push(format!("class `{label}` has {} training samples for {k} folds", idx.len()));
        }
        idx.shuffle(&mut seed::rng(seed, &["folds", &label]));
        for (pos, &i) in idx.iter().enumerate() {
            out.records[i].fold = Some((offset + pos) % k);
        }
        offset = (offset + idx.len()) % k;
    }
    let folds: BTreeMap<String, Option<usize>> = out
        .records
        .iter()
        .filter(|r| r.is_original())
        .map(|r| (r.path.clone(), r.fold))
        .collect();
    for r in out.records.iter_mut().filter(|r| !r.is_original()) {
        r.fold = r.source.as_ref().and_then(|s| folds.get(s).copied().flatten());
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((out, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Record;

    fn corpus(classes: &[(&str, usize)]) -> DatasetManifest {
        let mut v = Vec::new();
        for (c, n) in classes {
            for i in 0..*n {
                v.push(Record::original(format!("{c}/{i:04}.png"), *c, *c));
            }
        }
        DatasetManifest::new(v)
    }

    #[test]
    fn ten_per_class_gives_nine_one() {
        let (m, w) = split(&corpus(&[("a", 10), ("b", 10)]), 0.9, 1).unwrap();
        assert!(w.is_empty());
        let s = m.stats();
        assert_eq!((s.get("a").train_original, s.get("a").test), (9, 1));
        assert_eq!((s.get("b").train_original, s.get("b").test), (9, 1));
    }

    #[test]
    fn singleton_class_warns() {
        let (m, w) = split(&corpus(&[("a", 1), ("b", 4)]), 0.9, 1).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(m.stats().get("a").test, 0);
        assert_eq!(m.stats().get("b").test, 1);
    }

    #[test]
    fn bad_arguments() {
        assert!(split(&corpus(&[("a", 3)]), 1.0, 0).is_err());
        assert!(split(&corpus(&[("a", 3)]), 0.0, 0).is_err());
        assert!(assign_folds(&corpus(&[("a", 3)]), 1, 0).is_err());
    }

    #[test]
    fn hundred_samples_ten_folds_of_ten() {
        let (m, _) = split(&corpus(&[("a", 100)]), 0.5, 3).unwrap();
        let mut all = m.clone();
        for r in &mut all.records {
            r.split = Some(Split::Train);
        }
        let (f, w) = assign_folds(&all, 10, 3).unwrap();
        assert!(w.is_empty());
        let mut sizes = [0; 10];
        for r in &f.records {
            sizes[r.fold.unwrap()] += 1;
        }
        assert_eq!(sizes, [10; 10]);
    }

    #[test]
    fn test_count_examples() {
        assert_eq!(test_count(10, 0.9), 1);
        assert_eq!(test_count(2, 0.9), 1);
        assert_eq!(test_count(2, 0.1), 1);
        assert_eq!(test_count(100, 0.9), 10);
        assert_eq!(test_count(1, 0.9), 0);
    }
}
