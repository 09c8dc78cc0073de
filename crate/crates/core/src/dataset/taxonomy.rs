use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::{DatasetError, Result};

/// Merge pairs shipped as the default consolidation config.
pub const DEFAULT_CONSOLIDATION: &str = include_str!("../../config/consolidation.txt");

/// Raw dish names of the reference corpus, one directory each.
pub const REFERENCE_RAW_LABELS: [&str; 27] = [
    "baklava",
    "balaleet",
    "dolma",
    "falafel",
    "fattoush",
    "ful_medames",
    "harees",
    "hummus",
    "kabsa",
    "khubz",
    "kibbeh",
    "kinafah",
    "kofta",
    "luqaimat",
    "machboos",
    "madrouba",
    "manakish",
    "mansaf",
    "maqluba",
    "mutabbal",
    "pita",
    "salad",
    "samboosa",
    "shakshuka",
    "shawarma",
    "tabouleh",
    "umm_ali",
];

/// Raw label → final label map. Chains are resolved when the map is built,
/// so `consolidate` is idempotent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Consolidation {
    map: BTreeMap<String, String>,
}

impl Consolidation {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn reference() -> Self {
        Self::parse(DEFAULT_CONSOLIDATION).expect("bundled config parses")
    }

    /// One `raw -> final` pair per line (`→` also accepted); `#` starts a
    /// comment, blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((raw, fin)) = line.split_once("->").or_else(|| line.split_once('→')) else {
                return Err(DatasetError::Config {
                    line: i + 1,
                    reason: "expected `raw -> final`".into(),
                });
            };
            let (raw, fin) = (raw.trim(), fin.trim());
            if raw.is_empty() || fin.is_empty() {
                return Err(DatasetError::Config {
                    line: i + 1,
                    reason: "empty label".into(),
                });
            }
            pairs.push((i + 1, raw.to_string(), fin.to_string()));
        }
        let mut map = BTreeMap::new();
        for (line, raw, fin) in &pairs {
            if let Some(prev) = map.insert(raw.clone(), fin.clone()) {
                if &prev != fin {
                    return Err(DatasetError::Config {
                        line: *line,
                        reason: format!("`{raw}` already maps to `{prev}`"),
                    });
                }
            }
        }
        let mut resolved = BTreeMap::new();
        for raw in map.keys() {
            let mut cur = raw;
            let mut seen = BTreeSet::new();
            while let Some(next) = map.get(cur) {
                if next == cur {
                    break;
                }
                if !seen.insert(cur) {
                    return Err(DatasetError::Config {
                        line: 0,
                        reason: format!("mapping cycle through `{raw}`"),
                    });
                }
                cur = next;
            }
            if cur != raw {
                resolved.insert(raw.clone(), cur.clone());
            }
        }
        Ok(Self { map: resolved })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn consolidate(&self, raw: &str) -> String {
        self.map.get(raw).cloned().unwrap_or_else(|| raw.to_string())
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    pub fn to_config(&self) -> String {
        self.pairs().map(|(a, b)| format!("{a} -> {b}\n")).collect()
    }
}

/// Raw labels plus their consolidation; final labels are sorted, and the
/// position in that order is the class index everywhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTaxonomy {
    pub raw_labels: BTreeSet<String>,
    pub consolidation: Consolidation,
}

impl ClassTaxonomy {
    pub fn new(raw_labels: impl IntoIterator<Item = impl Into<String>>, consolidation: Consolidation) -> Self {
        Self {
            raw_labels: raw_labels.into_iter().map(Into::into).collect(),
            consolidation,
        }
    }

    pub fn reference() -> Self {
        Self::new(REFERENCE_RAW_LABELS, Consolidation::reference())
    }

    pub fn consolidate(&self, raw: &str) -> String {
        self.consolidation.consolidate(raw)
    }

    pub fn final_labels(&self) -> Vec<String> {
        let set: BTreeSet<String> = self.raw_labels.iter().map(|r| self.consolidate(r)).collect();
        set.into_iter().collect()
    }

    pub fn index_of(&self, final_label: &str) -> Option<usize> {
        self.final_labels().binary_search_by(|l| l.as_str().cmp(final_label)).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_merges() {
        let c = Consolidation::reference();
        assert_eq!(c.consolidate("kinafah"), "baklava_kinafah");
        assert_eq!(c.consolidate("baklava"), "baklava_kinafah");
        assert_eq!(c.consolidate("tabouleh"), "salad");
        assert_eq!(c.consolidate("fattoush"), "salad");
        assert_eq!(c.consolidate("salad"), "salad");
        assert_eq!(c.consolidate("pita"), "khubz_pita");
        assert_eq!(c.consolidate("kofta"), "kofta");
    }

    #[test]
    fn reference_taxonomy_has_23_final_labels() {
        let t = ClassTaxonomy::reference();
        assert_eq!(t.raw_labels.len(), 27);
        let f = t.final_labels();
        assert_eq!(f.len(), 23);
        assert!(f.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(t.index_of(&f[5]), Some(5));
        assert_eq!(t.index_of("kinafah"), None);
    }

    #[test]
    fn chains_resolve_and_cycles_fail() {
        let c = Consolidation::parse("a -> b\nb → c # comment\n\n").unwrap();
        assert_eq!(c.consolidate("a"), "c");
        assert_eq!(c.consolidate(&c.consolidate("a")), "c");
        assert!(Consolidation::parse("a -> b\nb -> a").is_err());
        assert!(Consolidation::parse("a b").is_err());
        assert!(Consolidation::parse("a -> b\na -> c").is_err());
        assert_eq!(Consolidation::parse(&c.to_config()).unwrap(), c);
    }
}
