//! Top-k accuracy, confusion matrix and misprediction reports.

use std::fmt::Write as _;

use num_rational::Ratio;
use serde::Serialize;

use crate::model::rank_classes;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("nothing to evaluate")]
    Empty,
    #[error("sample {sample}: true class {class} is outside the {classes} known classes")]
    UnknownClass { sample: usize, class: usize, classes: usize },
    #[error("sample {sample}: {got} scores for {classes} classes")]
    ScoreWidth { sample: usize, got: usize, classes: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("{scores} score rows, {truths} labels, {paths} paths")]
    Lengths { scores: usize, truths: usize, paths: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Hits within the top `k`, as an exact fraction of the evaluated samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TopK {
    pub k: usize,
    pub hits: u64,
    pub total: u64,
}

impl TopK {
    pub fn accuracy(&self) -> Ratio<u64> {
        Ratio::new(self.hits, self.total)
    }

    pub fn value(&self) -> f64 {
        self.hits as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub labels: Vec<String>,
    pub total: u64,
    pub top_k: Vec<TopK>,
    /// `confusion[i][j]`: samples of class `i` predicted as `j`.
    pub confusion: Vec<Vec<u64>>,
    /// `None` when the class was never predicted.
    pub precision: Vec<Option<f64>>,
    /// `None` when the class has no samples.
    pub recall: Vec<Option<f64>>,
}

impl Metrics {
    pub fn top(&self, k: usize) -> Option<TopK> {
        self.top_k.iter().copied().find(|t| t.k == k)
    }

    pub fn top1(&self) -> f64 {
        self.top(1).map_or(f64::NAN, |t| t.value())
    }

    pub fn top5(&self) -> f64 {
        self.top(5).map_or(f64::NAN, |t| t.value())
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            top1: f64,
            top5: f64,
            #[serde(flatten)]
            metrics: &'a Metrics,
        }
        serde_json::to_string_pretty(&Out {
            top1: self.top1(),
            top5: self.top5(),
            metrics: self,
        })
        .expect("metrics serialize")
    }

    /// One row per named model: top-1 and top-5 accuracy in percent.
    pub fn table(rows: &[(&str, &Metrics)]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<20} {:>8} {:>8}", "model", "top-1", "top-5");
        for (name, m) in rows {
            let _ = writeln!(s, "{name:<20} {:>7.1}% {:>7.1}%", 100.0 * m.top1(), 100.0 * m.top5());
        }
        s
    }

    pub fn per_class_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>7} {:>9} {:>7}", "class", "support", "precision", "recall");
        for (i, l) in self.labels.iter().enumerate() {
            let support: u64 = self.confusion[i].iter().sum();
            let _ = writeln!(s, "{l:<24} {support:>7} {:>9} {:>7}", fmt(self.precision[i]), fmt(self.recall[i]));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Misprediction {
    pub path: String,
    pub truth: String,
    pub predicted: String,
    pub probability: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    /// Top-1 misses, most confident first.
    pub mispredictions: Vec<Misprediction>,
}

impl Evaluation {
    pub fn mispredictions_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["path", "true", "predicted", "probability"])?;
        for m in &self.mispredictions {
            w.write_record([&m.path, &m.truth, &m.predicted, &m.probability.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }
}

/// Scores each sample's class probabilities against its true class.
/// Rankings break ties toward the lower class index; `k` above the class
/// count counts every sample as a hit.
pub fn evaluate(scores: &[Vec<f32>], truths: &[usize], paths: &[String], labels: &[String], ks: &[usize]) -> Result<Evaluation> {
    if scores.len() != truths.len() || paths.len() != truths.len() {
        return Err(MetricsError::Lengths {
            scores: scores.len(),
            truths: truths.len(),
            paths: paths.len(),
        });
    }
    if truths.is_empty() {
        return Err(MetricsError::Empty);
    }
    if ks.contains(&0) {
        return Err(MetricsError::ZeroK);
    }
    let c = labels.len();
    let mut hits = vec![0u64; ks.len()];
    let mut confusion = vec![vec![0u64; c]; c];
    let mut misses = Vec::new();
    for (i, (row, &t)) in scores.iter().zip(truths).enumerate() {
        if t >= c {
            return Err(MetricsError::UnknownClass {
                sample: i,
                class: t,
                classes: c,
            });
        }
        if row.len() != c {
            return Err(MetricsError::ScoreWidth {
                sample: i,
                got: row.len(),
                classes: c,
            });
        }
        let ranked = rank_classes(row);
        let rank = ranked.iter().position(|&j| j == t).expect("true class ranked");
        for (h, &k) in hits.iter_mut().zip(ks) {
            *h += u64::from(rank < k);
        }
        let p = ranked[0];
        confusion[t][p] += 1;
        if p != t {
            misses.push(Misprediction {
                path: paths[i].clone(),
                truth: labels[t].clone(),
                predicted: labels[p].clone(),
                probability: row[p],
            });
        }
    }
    misses.sort_by(|a, b| b.probability.total_cmp(&a.probability).then_with(|| a.path.cmp(&b.path)));
    let total = truths.len() as u64;
    let precision = (0..c)
        .map(|j| {
            let col: u64 = confusion.iter().map(|r| r[j]).sum();
            (col > 0).then(|| confusion[j][j] as f64 / col as f64)
        })
        .collect();
    let recall = confusion
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let n: u64 = r.iter().sum();
            (n > 0).then(|| r[i] as f64 / n as f64)
        })
        .collect();
    Ok(Evaluation {
        metrics: Metrics {
            labels: labels.to_vec(),
            total,
            top_k: ks.iter().zip(hits).map(|(&k, hits)| TopK { k, hits, total }).collect(),
            confusion,
            precision,
            recall,
        },
        mispredictions: misses,
    })
}
