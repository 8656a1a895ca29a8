//! Precision, recall and F1, micro- and macro-averaged, plus aggregation
//! across seeds.
//!
//! Predictions and gold are both maps from instance id to a label set.
//! Scores are percentages. Every ratio with a zero denominator is 0.
//! Macro F1 is the mean of per-class F1 values.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{Prediction, PredictionTask, Task};

pub type LabelSets = BTreeMap<String, BTreeSet<String>>;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction and gold ids differ: {0}")]
    Misaligned(String),
    #[error("macro averaging needs at least one label")]
    NoLabels,
    #[error("no runs to aggregate")]
    NoRuns,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Counts {
    pub fn scores(&self) -> Scores {
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f1 = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
        Scores {
            precision: 100.0 * p,
            recall: 100.0 * r,
            f1: 100.0 * f1,
        }
    }
}

fn check_aligned(pred: &LabelSets, gold: &LabelSets) -> Result<(), MetricsError> {
    if pred.len() == gold.len() && pred.keys().eq(gold.keys()) {
        return Ok(());
    }
    let only_pred = pred.keys().find(|k| !gold.contains_key(*k));
    let only_gold = gold.keys().find(|k| !pred.contains_key(*k));
    Err(MetricsError::Misaligned(match (only_pred, only_gold) {
        (Some(k), _) => format!("`{k}` has a prediction but no gold"),
        (_, Some(k)) => format!("`{k}` has gold but no prediction"),
        _ => "key sets differ".into(),
    }))
}

/// Pooled counts over every (instance, label) decision.
pub fn micro_counts(pred: &LabelSets, gold: &LabelSets) -> Result<Counts, MetricsError> {
    check_aligned(pred, gold)?;
    let mut c = Counts::default();
    for (id, p) in pred {
        let g = &gold[id];
        let tp = p.intersection(g).count() as u64;
        c.tp += tp;
        c.fp += p.len() as u64 - tp;
        c.fn_ += g.len() as u64 - tp;
    }
    Ok(c)
}

pub fn micro_prf(pred: &LabelSets, gold: &LabelSets) -> Result<Scores, MetricsError> {
    Ok(micro_counts(pred, gold)?.scores())
}

/// One-vs-rest counts for each label in `labels`.
pub fn per_class_counts(
    pred: &LabelSets,
    gold: &LabelSets,
    labels: &[String],
) -> Result<Vec<Counts>, MetricsError> {
    check_aligned(pred, gold)?;
    Ok(labels
        .iter()
        .map(|l| {
            let mut c = Counts::default();
            for (id, p) in pred {
                match (p.contains(l), gold[id].contains(l)) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    (false, false) => {}
                }
            }
            c
        })
        .collect())
}

pub fn macro_prf(
    pred: &LabelSets,
    gold: &LabelSets,
    labels: &[String],
) -> Result<Scores, MetricsError> {
    if labels.is_empty() {
        return Err(MetricsError::NoLabels);
    }
    let per_class: Vec<Scores> = per_class_counts(pred, gold, labels)?
        .iter()
        .map(Counts::scores)
        .collect();
    let n = per_class.len() as f64;
    Ok(Scores {
        precision: per_class.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: per_class.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: per_class.iter().map(|s| s.f1).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation over the square root of the run count;
    /// absent for a single run.
    pub standard_error: Option<f64>,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate, MetricsError> {
    let n = values.len();
    if n == 0 {
        return Err(MetricsError::NoRuns);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let standard_error = (n >= 2).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        var.sqrt() / (n as f64).sqrt()
    });
    Ok(Aggregate {
        mean,
        standard_error,
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    Micro,
    Macro,
}

impl Averaging {
    /// Macro for single-label tasks, micro for multi-label ones.
    pub fn for_task(task: &Task) -> Self {
        match task {
            Task::Multiclass { .. } => Averaging::Macro,
            Task::BinarySet { .. } => Averaging::Micro,
        }
    }

    pub fn score(
        self,
        pred: &LabelSets,
        gold: &LabelSets,
        labels: &[String],
    ) -> Result<Scores, MetricsError> {
        match self {
            Averaging::Micro => micro_prf(pred, gold),
            Averaging::Macro => macro_prf(pred, gold, labels),
        }
    }
}

/// Label sets implied by a prediction log. Binary predictions contribute
/// their label when the final answer is Yes; multiclass ones contribute
/// their final label, or nothing when abstaining.
pub fn prediction_sets(predictions: &[Prediction]) -> LabelSets {
    let mut sets = LabelSets::new();
    for p in predictions {
        let entry = sets.entry(p.test_id.clone()).or_default();
        match &p.task {
            PredictionTask::Binary { label } => {
                if p.is_yes() {
                    entry.insert(label.clone());
                }
            }
            PredictionTask::Multiclass { .. } => {
                if let Some(l) = &p.final_answer {
                    entry.insert(l.clone());
                }
            }
        }
    }
    sets
}

/// Gold label sets with every label outside `labels` dropped.
pub fn gold_sets<'a>(
    gold: impl IntoIterator<Item = (&'a str, &'a BTreeSet<String>)>,
    labels: &[String],
) -> LabelSets {
    let keep: BTreeSet<&String> = labels.iter().collect();
    gold.into_iter()
        .map(|(id, ls)| {
            (
                id.to_string(),
                ls.iter().filter(|l| keep.contains(l)).cloned().collect(),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub precision: Aggregate,
    pub recall: Aggregate,
    pub f1: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub mode: String,
    pub averaging: Averaging,
    pub per_seed: BTreeMap<u64, Scores>,
    pub summary: MetricSummary,
}

impl EvalReport {
    pub fn new(
        task: &Task,
        mode: impl Into<String>,
        averaging: Averaging,
        per_seed: BTreeMap<u64, Scores>,
    ) -> Result<Self, MetricsError> {
        let col = |f: fn(&Scores) -> f64| aggregate(&per_seed.values().map(f).collect::<Vec<_>>());
        let summary = MetricSummary {
            precision: col(|s| s.precision)?,
            recall: col(|s| s.recall)?,
            f1: col(|s| s.f1)?,
        };
        Ok(Self {
            task: task.name().to_string(),
            mode: mode.into(),
            averaging,
            per_seed,
            summary,
        })
    }

    /// Aligned plain-text table: one row per seed, then the mean with its
    /// standard error.
    pub fn to_table(&self) -> String {
        let avg = match self.averaging {
            Averaging::Micro => "micro",
            Averaging::Macro => "macro",
        };
        let mut out = String::new();
        let _ = writeln!(out, "{} / {} ({avg})", self.mode, self.task);
        let _ = writeln!(out, "{:<8} {:>16} {:>16} {:>16}", "seed", "P", "R", "F1");
        for (seed, s) in &self.per_seed {
            let _ = writeln!(
                out,
                "{:<8} {:>16.3} {:>16.3} {:>16.3}",
                seed, s.precision, s.recall, s.f1
            );
        }
        let cell = |a: &Aggregate| match a.standard_error {
            Some(se) => format!("{:.3} ± {:.3}", a.mean, se),
            None => format!("{:.3}", a.mean),
        };
        let _ = writeln!(
            out,
            "{:<8} {:>16} {:>16} {:>16}",
            "mean",
            cell(&self.summary.precision),
            cell(&self.summary.recall),
            cell(&self.summary.f1)
        );
        out
    }
}
