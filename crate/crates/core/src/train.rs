//! Training: class-balanced batches, warm-up schedule, AdamW updates.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{self, BalancedSampler, SyntheticClip};
use crate::embedder::Geometry;
use crate::error::{HstaError, Result};
use crate::model::{HstaModel, Sample};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub warmup_init_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 150,
            base_lr: 5e-5,
            warmup_epochs: 5,
            warmup_init_lr: 1e-6,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(HstaError::Config("batch_size and epochs must be positive".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(HstaError::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        // Zero rates are allowed so a run can be frozen on purpose.
        let rates = [self.base_lr, self.warmup_init_lr, self.weight_decay];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(HstaError::Config(
                "learning rates and weight decay must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps.is_nan()
            || self.eps <= 0.0
        {
            return Err(HstaError::Config(
                "betas must lie in [0, 1) and eps must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate for optimizer step `step` (0-based): linear from
/// `warmup_init_lr` at step 0 to `base_lr` at the last warm-up step, then
/// constant.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    if warmup <= 1 || step + 1 >= warmup {
        return cfg.base_lr;
    }
    let frac = step as f64 / (warmup - 1) as f64;
    cfg.warmup_init_lr + (cfg.base_lr - cfg.warmup_init_lr) * frac
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update from the stored gradients followed by
/// decoupled weight decay `θ ← θ − lr·wd·θ`. Gradients are zeroed afterwards.
pub fn optimizer_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = p.grad.data();
        let theta = p.value.data_mut();
        for j in 0..theta.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            theta[j] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            theta[j] -= lr * cfg.weight_decay * theta[j];
        }
    }
    store.zero_grads();
}

/// Model inputs for a clip: uniformly sampled frames plus onset/apex.
pub fn clip_sample(clip: &SyntheticClip, geometry: &Geometry) -> Result<Sample> {
    let video = data::uniform_sample_frames(clip, geometry.frames)?;
    let (onset, apex) = data::extract_special_frames(clip);
    Sample::from_frames(geometry, &video, &onset, &apex, clip.label)
}

pub fn clip_samples(clips: &[SyntheticClip], geometry: &Geometry) -> Result<Vec<Sample>> {
    clips.iter().map(|c| clip_sample(c, geometry)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Rate used by the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: usize,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// One `epoch, mean_loss, lr` line per epoch.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            writeln!(out, "{}, {:.9e}, {:.9e}", e.epoch, e.mean_loss, e.lr).unwrap();
        }
        out
    }
}

/// Mean loss of one batch; leaves `weight/|batch|`-scaled gradients in the store.
pub fn batch_gradients(model: &mut HstaModel, samples: &[Sample], batch: &[usize]) -> Result<f64> {
    let w = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for &i in batch {
        total += model.accumulate_gradients(&samples[i], w)?;
    }
    Ok(total * w)
}

/// Trains on `samples[train_ids]`. Every class must occur in the training set.
pub fn train(model: &mut HstaModel, samples: &[Sample], train_ids: &[usize], cfg: &TrainConfig) -> Result<TrainLog> {
    train_with(model, samples, train_ids, cfg, |_, _| Ok(()))
}

/// [`train`] with a callback after every epoch; an error from the callback
/// stops training.
pub fn train_with(
    model: &mut HstaModel,
    samples: &[Sample],
    train_ids: &[usize],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &HstaModel) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_ids.is_empty() {
        return Err(HstaError::Config("empty training set".into()));
    }
    if let Some(&bad) = train_ids.iter().find(|&&i| i >= samples.len()) {
        return Err(HstaError::Contract(format!("training id {bad} out of range")));
    }
    let items: Vec<(usize, usize)> = train_ids.iter().map(|&i| (i, samples[i].label)).collect();
    let c = model.config.num_classes;
    // Batches must be able to hold one clip per class.
    let sampler = BalancedSampler::new(&items, c, cfg.batch_size.max(c), cfg.seed)?;
    let steps_per_epoch = sampler.batches_per_epoch();
    let mut state = AdamState::new(&model.store);
    model.store.zero_grads();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        let mut lr = 0.0;
        for batch in sampler.epoch(epoch) {
            let loss = batch_gradients(model, samples, &batch)?;
            if !loss.is_finite() {
                return Err(HstaError::Contract(format!("non-finite loss at step {}", log.steps)));
            }
            loss_sum += loss * batch.len() as f64;
            count += batch.len();
            lr = lr_at(log.steps, steps_per_epoch, cfg);
            optimizer_step(&mut model.store, &mut state, lr, cfg);
            log.steps += 1;
        }
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / count as f64,
            lr,
        };
        on_epoch(&entry, model)?;
        log.epochs.push(entry);
    }
    Ok(log)
}

pub fn predict_all(model: &HstaModel, samples: &[Sample], ids: &[usize]) -> Result<Vec<usize>> {
    ids.iter().map(|&i| model.predict(&samples[i])).collect()
}
