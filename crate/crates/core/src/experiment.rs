//! Cross-validated experiments: configuration, fold execution and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, Dataset, GenSpec};
use crate::error::{HstaError, Result};
use crate::eval::{self, FoldOutcome, FoldPlan, Metrics, Protocol};
use crate::model::{HstaConfig, HstaModel, Sample};
use crate::train::{self, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives model initialization, batch order and the K-fold split.
    pub seed: u64,
    pub protocol: Protocol,
    /// Fold count for the K-fold protocol.
    pub k: usize,
    pub data: GenSpec,
    pub model: HstaConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            protocol: Protocol::Kfold,
            k: 5,
            data: GenSpec::default(),
            model: HstaConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HstaError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.num_classes != self.data.num_classes {
            return Err(HstaError::Config(format!(
                "model has {} classes but the data has {}",
                self.model.num_classes, self.data.num_classes
            )));
        }
        let g = &self.model.geometry;
        if g.frames > self.data.frames {
            return Err(HstaError::Config(format!(
                "cannot sample {} frames from clips of {}",
                g.frames, self.data.frames
            )));
        }
        if (g.height, g.width, g.channels) != (self.data.height, self.data.width, self.data.channels) {
            return Err(HstaError::Config(format!(
                "model expects {}x{}x{} frames, data has {}x{}x{}",
                g.height, g.width, g.channels, self.data.height, self.data.width, self.data.channels
            )));
        }
        if self.protocol == Protocol::Kfold && self.k < 2 {
            return Err(HstaError::Config(format!("k must be at least 2, got {}", self.k)));
        }
        Ok(())
    }

    /// Sets one dotted key (e.g. `model.video_depth`) from its text form.
    /// The value is parsed as a TOML literal, falling back to a bare string.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| HstaError::Config(e.to_string()))?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| HstaError::Config(format!("unknown config key {key}")))?;
        }
        *slot = parse_literal(value);
        root.try_into()
            .map_err(|e: toml::de::Error| HstaError::Config(format!("bad value {value:?} for {key}: {}", e.message())))
    }
}

fn parse_literal(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.into())),
        Err(_) => toml::Value::String(value.into()),
    }
}

/// Fold plan for a dataset; ids are positions in `dataset.clips`.
pub fn plan_folds(dataset: &Dataset, protocol: Protocol, k: usize, seed: u64) -> Result<FoldPlan> {
    match protocol {
        Protocol::Loso => {
            let clips: Vec<(usize, usize)> = dataset
                .clips
                .iter()
                .enumerate()
                .map(|(i, c)| (i, c.subject_id))
                .collect();
            eval::loso_folds(&clips)
        }
        Protocol::Kfold => {
            let ids: Vec<usize> = (0..dataset.clips.len()).collect();
            eval::kfold_folds(&ids, k, seed)
        }
    }
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub index: usize,
    pub train_size: usize,
    /// Positions in the dataset of the test clips, aligned with `outcome`.
    pub test_ids: Vec<usize>,
    pub outcome: FoldOutcome,
    pub metrics: Metrics,
    pub log: TrainLog,
    pub model: HstaModel,
}

#[derive(Clone, Debug)]
pub struct CrossvalResult {
    pub folds: Vec<FoldResult>,
    pub pooled: Metrics,
}

impl CrossvalResult {
    pub fn report(&self) -> String {
        let per_fold: Vec<Metrics> = self.folds.iter().map(|f| f.metrics).collect();
        eval::format_report(&per_fold, &self.pooled)
    }
}

/// Trains and evaluates one fold with seeds derived from `seed` and the fold index.
pub fn run_fold(samples: &[Sample], plan: &FoldPlan, index: usize, cfg: &ExperimentConfig) -> Result<FoldResult> {
    let fold = &plan.folds[index];
    let mut model = HstaModel::new(cfg.model.clone(), mix_seed(cfg.seed, 2 * index as u64))?;
    let train_cfg = TrainConfig {
        seed: mix_seed(cfg.seed, 2 * index as u64 + 1),
        ..cfg.train.clone()
    };
    let log = train::train(&mut model, samples, &fold.train, &train_cfg)?;
    let outcome = FoldOutcome {
        predictions: train::predict_all(&model, samples, &fold.test)?,
        labels: fold.test.iter().map(|&i| samples[i].label).collect(),
    };
    let metrics = eval::aggregate_over_folds(std::slice::from_ref(&outcome), cfg.model.num_classes)?;
    Ok(FoldResult {
        index,
        train_size: fold.train.len(),
        test_ids: fold.test.clone(),
        outcome,
        metrics,
        log,
        model,
    })
}

/// Runs every fold, at most `jobs` at a time, and pools the test predictions.
/// Results are independent of `jobs`.
pub fn run_crossval(dataset: &Dataset, cfg: &ExperimentConfig, jobs: usize) -> Result<CrossvalResult> {
    cfg.validate()?;
    let samples = train::clip_samples(&dataset.clips, &cfg.model.geometry)?;
    let plan = plan_folds(dataset, cfg.protocol, cfg.k, cfg.seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HstaError::Config(format!("cannot start {jobs} workers: {e}")))?;
    let results: Vec<Result<FoldResult>> = pool.install(|| {
        use rayon::prelude::*;
        (0..plan.len())
            .into_par_iter()
            .map(|i| run_fold(&samples, &plan, i, cfg))
            .collect()
    });
    let folds = results.into_iter().collect::<Result<Vec<_>>>()?;
    let outcomes: Vec<FoldOutcome> = folds.iter().map(|f| f.outcome.clone()).collect();
    let pooled = eval::aggregate_over_folds(&outcomes, cfg.model.num_classes)?;
    Ok(CrossvalResult { folds, pooled })
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRecord {
    fold: usize,
    clip_id: usize,
    subject_id: usize,
    label: usize,
    prediction: usize,
}

/// Writes one `fold,clip_id,subject_id,label,prediction` row per test clip.
pub fn write_predictions(path: &Path, dataset: &Dataset, result: &CrossvalResult) -> Result<()> {
    let err = |e: csv::Error| HstaError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for f in &result.folds {
        for ((&id, &label), &prediction) in f.test_ids.iter().zip(&f.outcome.labels).zip(&f.outcome.predictions) {
            let clip = &dataset.clips[id];
            w.serialize(PredictionRecord {
                fold: f.index,
                clip_id: clip.clip_id,
                subject_id: clip.subject_id,
                label,
                prediction,
            })
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| HstaError::io(path, e))
}

/// Reads a predictions file back into per-fold outcomes, in fold order.
pub fn read_predictions(path: &Path) -> Result<Vec<FoldOutcome>> {
    let err = |e: csv::Error| HstaError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    let mut folds: BTreeMap<usize, FoldOutcome> = BTreeMap::new();
    for rec in r.deserialize::<PredictionRecord>() {
        let rec = rec.map_err(err)?;
        let o = folds.entry(rec.fold).or_default();
        o.labels.push(rec.label);
        o.predictions.push(rec.prediction);
    }
    Ok(folds.into_values().collect())
}

/// One row per swept value: `value ACC UAR UF1` of the pooled metrics.
pub fn format_sweep(key: &str, rows: &[(String, Metrics)]) -> String {
    let width = rows.iter().map(|(v, _)| v.len()).chain([key.len()]).max().unwrap_or(0);
    let mut out = String::new();
    writeln!(out, "{:<width$} {:>6} {:>6} {:>6}", key, "ACC", "UAR", "UF1").unwrap();
    for (v, m) in rows {
        writeln!(
            out,
            "{:<width$} {:>6} {:>6} {:>6}",
            v,
            eval::percent(m.acc),
            eval::percent(m.uar),
            eval::percent(m.uf1)
        )
        .unwrap();
    }
    out
}
