//! Class-balanced metrics and cross-validation planning.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HstaError, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    /// Samples whose true label is the class.
    pub n: Vec<u64>,
}

impl ConfusionCounts {
    pub fn zeros(num_classes: usize) -> Self {
        ConfusionCounts {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
            n: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.n.len()
    }

    pub fn total(&self) -> u64 {
        self.n.iter().sum()
    }

    fn record(&mut self, pred: usize, label: usize) {
        self.n[label] += 1;
        if pred == label {
            self.tp[label] += 1;
        } else {
            self.fp[pred] += 1;
            self.fn_[label] += 1;
        }
    }
}

pub fn confusion_counts(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<ConfusionCounts> {
    if predictions.len() != labels.len() {
        return Err(HstaError::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut cc = ConfusionCounts::zeros(num_classes);
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(HstaError::Contract(format!(
                "prediction {p} / label {l} outside {num_classes} classes"
            )));
        }
        cc.record(p, l);
    }
    Ok(cc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub uf1: f64,
    pub uar: f64,
    pub acc: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// UF1, UAR and ACC. A class whose denominator is zero contributes 0 to its
/// mean, which still divides by the full class count.
pub fn compute_metrics(cc: &ConfusionCounts) -> Result<Metrics> {
    let c = cc.num_classes();
    if c == 0 {
        return Err(HstaError::Contract("metrics need at least one class".into()));
    }
    let mut uf1 = 0.0;
    let mut uar = 0.0;
    for i in 0..c {
        uf1 += ratio(2 * cc.tp[i], 2 * cc.tp[i] + cc.fp[i] + cc.fn_[i]);
        uar += ratio(cc.tp[i], cc.n[i]);
    }
    Ok(Metrics {
        uf1: uf1 / c as f64,
        uar: uar / c as f64,
        acc: ratio(cc.tp.iter().sum(), cc.total()),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    fn from_tests(all: &[usize], tests: Vec<Vec<usize>>) -> Self {
        let folds = tests
            .into_iter()
            .map(|test| {
                let train = all.iter().copied().filter(|id| !test.contains(id)).collect();
                Fold { train, test }
            })
            .collect();
        FoldPlan { folds }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Loso,
    #[default]
    Kfold,
}

/// One fold per subject, in ascending subject order. `clips` are
/// `(clip_id, subject_id)` pairs.
pub fn loso_folds(clips: &[(usize, usize)]) -> Result<FoldPlan> {
    let mut by_subject: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(id, subject) in clips {
        by_subject.entry(subject).or_default().push(id);
    }
    if by_subject.len() < 2 {
        return Err(HstaError::Contract(format!(
            "leave-one-subject-out needs at least 2 subjects, got {}",
            by_subject.len()
        )));
    }
    let all: Vec<usize> = clips.iter().map(|c| c.0).collect();
    Ok(FoldPlan::from_tests(&all, by_subject.into_values().collect()))
}

/// Seeded shuffle, then `k` contiguous folds whose sizes differ by at most one.
pub fn kfold_folds(clip_ids: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || k > clip_ids.len() {
        return Err(HstaError::Contract(format!(
            "k must be in 2..={}, got {k}",
            clip_ids.len()
        )));
    }
    let mut shuffled = clip_ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (shuffled.len() / k, shuffled.len() % k);
    let mut tests = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        tests.push(shuffled[start..start + size].to_vec());
        start += size;
    }
    Ok(FoldPlan::from_tests(clip_ids, tests))
}

/// Predictions and labels of one fold's test set.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Pools all folds into one confusion table and scores it once.
pub fn aggregate_over_folds(outcomes: &[FoldOutcome], num_classes: usize) -> Result<Metrics> {
    let mut cc = ConfusionCounts::zeros(num_classes);
    for o in outcomes {
        let part = confusion_counts(&o.predictions, &o.labels, num_classes)?;
        for i in 0..num_classes {
            cc.tp[i] += part.tp[i];
            cc.fp[i] += part.fp[i];
            cc.fn_[i] += part.fn_[i];
            cc.n[i] += part.n[i];
        }
    }
    compute_metrics(&cc)
}

/// Metric as a one-decimal percentage, e.g. `42.6`.
pub fn percent(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

/// Plain-text table: one row per fold, then the pooled row.
pub fn format_report(per_fold: &[Metrics], pooled: &Metrics) -> String {
    let mut out = String::new();
    writeln!(out, "{:<8} {:>6} {:>6} {:>6}", "fold", "ACC", "UAR", "UF1").unwrap();
    for (i, m) in per_fold.iter().enumerate() {
        writeln!(
            out,
            "{:<8} {:>6} {:>6} {:>6}",
            i,
            percent(m.acc),
            percent(m.uar),
            percent(m.uf1)
        )
        .unwrap();
    }
    writeln!(
        out,
        "{:<8} {:>6} {:>6} {:>6}",
        "pooled",
        percent(pooled.acc),
        percent(pooled.uar),
        percent(pooled.uf1)
    )
    .unwrap();
    out
}
