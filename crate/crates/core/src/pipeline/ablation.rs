use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::{run_pipeline, PipelineConfig, PipelineError, Result};
use crate::augment::AugmentationPolicy;
use crate::dataset::Consolidation;
use crate::model::Model;
use crate::train::FeatureCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AblationCell {
    pub consolidate: bool,
    pub augment: bool,
}

impl AblationCell {
    /// The three configurations of the standard comparison, in its order.
    pub const REFERENCE_GRID: [AblationCell; 3] = [
        AblationCell {
            consolidate: false,
            augment: true,
        },
        AblationCell {
            consolidate: true,
            augment: false,
        },
        AblationCell {
            consolidate: true,
            augment: true,
        },
    ];

    pub fn name(&self) -> String {
        let w = |b: bool| if b { "w/" } else { "w/o" };
        format!("{} combined classes, {} augmentation", w(self.consolidate), w(self.augment))
    }

    fn dir(&self) -> String {
        format!("cons-{}_aug-{}", u8::from(self.consolidate), u8::from(self.augment))
    }

    /// Top-1 accuracy this cell reaches on the full-size photo corpus with a
    /// pretrained backbone.
    pub fn reference_top1(&self) -> Option<f64> {
        match (self.consolidate, self.augment) {
            (false, true) => Some(0.900),
            (true, false) => Some(0.935),
            (true, true) => Some(0.940),
            _ => None,
        }
    }

    /// Parses `cons,aug` with `on`/`off` (or 1/0) values, e.g. `on,off`.
    pub fn parse(s: &str) -> Option<Self> {
        let flag = |v: &str| match v.trim() {
            "on" | "1" | "true" => Some(true),
            "off" | "0" | "false" => Some(false),
            _ => None,
        };
        let (a, b) = s.split_once(',')?;
        Some(Self {
            consolidate: flag(a)?,
            augment: flag(b)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub name: String,
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub top1: f64,
    pub top5: f64,
    pub reference_top1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<42} {:>8} {:>8} {:>10}",
            "configuration", "top-1", "top-5", "target"
        );
        for r in &self.rows {
            let target = r.reference_top1.map_or_else(|| "-".into(), |v| format!("{:.1}%", 100.0 * v));
            let _ = writeln!(
                s,
                "{:<42} {:>7.1}% {:>7.1}% {:>10}",
                format!("{} [{}]", r.name, r.classes),
                100.0 * r.top1,
                100.0 * r.top5,
                target
            );
        }
        let _ = writeln!(s, "[n]: number of classes the cell was trained and evaluated over.");
        let _ = writeln!(s, "target: top-1 on the full-size photo corpus with a pretrained backbone.");
        s
    }
}

/// Runs the pipeline once per cell under `work/<cell>`. Consolidation off
/// keeps every raw label as its own class. Features of identical images are
/// shared across cells.
pub fn run_ablation(
    corpus: &Path,
    work: &Path,
    backbone: &Model,
    base: &PipelineConfig,
    grid: &[AblationCell],
) -> Result<AblationReport> {
    if grid.is_empty() {
        return Err(PipelineError::Invalid("empty ablation grid".into()));
    }
    let mut cache: Option<FeatureCache> = None;
    let mut rows = Vec::new();
    for cell in grid {
        let mut cfg = base.clone();
        if !cell.consolidate {
            cfg.consolidation = Consolidation::identity();
        }
        cfg.augmentation = if cell.augment {
            Some(base.augmentation.clone().unwrap_or_else(|| AugmentationPolicy::default().with_seed(base.seed)))
        } else {
            None
        };
        let run = run_pipeline(corpus, &work.join(cell.dir()), backbone, &cfg, cache.as_ref())?;
        let s = run.summary();
        rows.push(AblationRow {
            cell: *cell,
            name: cell.name(),
            classes: s.classes,
            train: s.train,
            test: s.test,
            top1: s.top1,
            top5: s.top5,
            reference_top1: cell.reference_top1(),
        });
        cache = Some(run.cache);
    }
    Ok(AblationReport { rows })
}
