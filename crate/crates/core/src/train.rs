//! Training loop with periodic validation, patience-based early stopping and
//! best-checkpoint tracking.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_sample, AugmentConfig};
use crate::autodiff::{sgd_step, Checkpoint};
use crate::model::{forward_train, DetectorConfig, ModelError, ModelGraph};
use crate::sample::Sample;
use crate::surgery::{apply_surgery, AblationSpec};

/// Loop controls. The defaults are the full-scale protocol; [`TrainConfig::desk`]
/// shrinks the check interval and patience for small synthetic runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub eval_interval_iters: usize,
    pub patience_checks: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 2, learning_rate: 0.01, eval_interval_iters: 220, patience_checks: 30, max_iters: 20_000, seed: 0 }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self { eval_interval_iters: 20, patience_checks: 5, max_iters: 2_000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field: &'static str, reason: &str| Err(TrainError::Config { field, reason: reason.into() });
        for (field, v) in [
            ("batch_size", self.batch_size),
            ("eval_interval_iters", self.eval_interval_iters),
            ("patience_checks", self.patience_checks),
            ("max_iters", self.max_iters),
        ] {
            if v == 0 {
                return bad(field, "must be positive");
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate", "must be a positive finite number");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("train.{field}: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("non-finite loss at iteration {iter}")]
    NonFiniteLoss { iter: usize, diagnostic: Box<Checkpoint> },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One validation check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub check_index: usize,
    pub iter: usize,
    /// Mean training loss since the previous check.
    pub train_loss: f32,
    pub val_loss: f32,
    pub is_best: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation check.
    pub checkpoint: Checkpoint,
    pub best_check: usize,
    pub best_val_loss: f32,
    pub history: Vec<HistoryEntry>,
    pub iters_run: usize,
    pub stopped_early: bool,
}

/// Index of the best check: the first value that no later value strictly
/// undercuts.
pub fn best_index(val_losses: &[f32]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in val_losses.iter().enumerate() {
        if best.is_none_or(|b| v < val_losses[b]) {
            best = Some(i);
        }
    }
    best
}

/// True when the last `patience` checks brought no strict improvement over
/// the best value seen before them. Ties count as no improvement.
pub fn early_stop(val_losses: &[f32], patience: usize) -> bool {
    match best_index(val_losses) {
        Some(b) => val_losses.len() - 1 - b >= patience.max(1),
        None => false,
    }
}

/// Runs the loop with a fixed augmentation and detector configuration.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub augment: AugmentConfig,
    pub detector: DetectorConfig,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Self {
        Self { config, augment: AugmentConfig::default(), detector: DetectorConfig::default() }
    }

    /// Trains `model` in place and leaves it holding the best-validation
    /// parameters. With `surgery`, only that spec's groups are updated. An
    /// empty `val_set` falls back to the un-augmented training set.
    pub fn train(
        &self,
        model: &mut ModelGraph,
        train_set: &[Sample],
        val_set: &[Sample],
        surgery: Option<AblationSpec>,
    ) -> Result<TrainOutcome, TrainError> {
        let cfg = &self.config;
        cfg.validate()?;
        self.augment.validate().map_err(|e| TrainError::Config { field: e.field, reason: e.reason })?;
        if train_set.is_empty() {
            return Err(TrainError::EmptyTrainSet);
        }
        let val_set = if val_set.is_empty() {
            log::warn!("empty validation set; validating on the training set");
            train_set
        } else {
            val_set
        };
        if let Some(spec) = surgery {
            apply_surgery(model, spec);
        }
        model.zero_grad();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ self.augment.seed.rotate_left(32));
        aug_rng.set_stream(1);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut cursor = order.len();

        let mut history: Vec<HistoryEntry> = Vec::new();
        let mut best = model.checkpoint();
        let mut running = (0.0f64, 0usize);
        let mut iter = 0;
        let mut stopped_early = false;

        while iter < cfg.max_iters {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            while batch.len() < cfg.batch_size.min(train_set.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(augment_sample(&train_set[order[cursor]], &self.augment, &mut aug_rng));
                cursor += 1;
            }
            let refs: Vec<&Sample> = batch.iter().collect();
            let mut loss = forward_train(model, &refs, &self.detector, &mut rng)?;
            let value = loss.total_value();
            iter += 1;
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { iter, diagnostic: Box::new(model.checkpoint()) });
            }
            loss.backward_into(model.params_mut())?;
            sgd_step(model.params_mut(), cfg.learning_rate);
            running.0 += value as f64;
            running.1 += 1;

            if iter % cfg.eval_interval_iters == 0 || iter == cfg.max_iters {
                let val_loss = self.validation_loss(model, val_set)?;
                if !val_loss.is_finite() {
                    return Err(TrainError::NonFiniteLoss { iter, diagnostic: Box::new(model.checkpoint()) });
                }
                let is_best = history.iter().all(|h| val_loss < h.val_loss);
                if is_best {
                    best = model.checkpoint();
                }
                let entry = HistoryEntry { check_index: history.len(), iter, train_loss: (running.0 / running.1 as f64) as f32, val_loss, is_best };
                log::info!(
                    "check {} iter {} train {:.4} val {:.4}{}",
                    entry.check_index,
                    iter,
                    entry.train_loss,
                    val_loss,
                    if is_best { " *" } else { "" }
                );
                history.push(entry);
                running = (0.0, 0);
                let losses: Vec<f32> = history.iter().map(|h| h.val_loss).collect();
                if early_stop(&losses, cfg.patience_checks) {
                    stopped_early = true;
                    break;
                }
            }
        }

        let losses: Vec<f32> = history.iter().map(|h| h.val_loss).collect();
        let best_check = best_index(&losses).expect("at least one check runs");
        model.load_checkpoint(&best)?;
        Ok(TrainOutcome { checkpoint: best, best_check, best_val_loss: losses[best_check], history, iters_run: iter, stopped_early })
    }

    /// Mean composite loss over `samples` without augmentation. Sampling
    /// uses a fixed stream so successive checks are comparable.
    pub fn validation_loss(&self, model: &ModelGraph, samples: &[Sample]) -> Result<f32, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(2);
        let mut total = 0.0f64;
        let mut batches = 0;
        for chunk in samples.chunks(self.config.batch_size) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            total += forward_train(model, &refs, &self.detector, &mut rng)?.total_value() as f64;
            batches += 1;
        }
        Ok((total / batches.max(1) as f64) as f32)
    }
}

/// [`Trainer::train`] with default augmentation and detector settings.
pub fn train(
    model: &mut ModelGraph,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    surgery: Option<AblationSpec>,
) -> Result<TrainOutcome, TrainError> {
    Trainer::new(config.clone()).train(model, train_set, val_set, surgery)
}

pub fn history_csv(history: &[HistoryEntry]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for h in history {
        w.serialize(h).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

pub fn write_history(path: impl AsRef<Path>, history: &[HistoryEntry]) -> std::io::Result<()> {
    std::fs::write(path, history_csv(history))
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<HistoryEntry>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}
