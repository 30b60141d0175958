//! Two-stage experiments: evaluate a model on a dataset, and fine-tune a
//! pretrained checkpoint under every requested ablation.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::autodiff::Checkpoint;
use crate::coco::Dataset;
use crate::metrics::{evaluate, per_threshold_csv, ImageEval, MetricsError, MetricsReport, ThresholdStep};
use crate::model::{forward_infer, ArchConfig, DetectorConfig, ModelError, ModelGraph};
use crate::sample::Sample;
use crate::surgery::AblationSpec;
use crate::train::{write_history, TrainError, TrainOutcome, Trainer};

/// Environment variable capping the matrix worker count.
pub const THREADS_ENV: &str = "SCALPEL_SEG_THREADS";

/// Rendered in place of metrics when nothing passed the score gate.
pub const NO_PREDICTIONS: &str = "no predictions from model";

pub const MATRIX_HEADER: &str = "testset,ablation,ap,p,r,f1,status";

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("run for `{ablation}` did not start from the pretrained checkpoint ({found} != {expected})")]
    Isolation { ablation: String, expected: String, found: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Evaluation knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score_floor: f32,
    pub iou_step: ThresholdStep,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { score_floor: crate::metrics::DEFAULT_SCORE_GATE, iou_step: ThresholdStep::Fine }
    }
}

/// Runs inference over `samples` and scores the masks.
pub fn evaluate_model(model: &ModelGraph, samples: &[Sample], eval: &EvalConfig, det: &DetectorConfig) -> Result<MetricsReport, ExperimentError> {
    let mut images = Vec::with_capacity(samples.len());
    for s in samples {
        let dets = forward_infer(model, &s.image, eval.score_floor, det)?;
        images.push(ImageEval::from_detections(s, &dets));
    }
    Ok(evaluate(&images, &eval.iou_step.thresholds(), eval.score_floor)?)
}

/// Outcome of one (test set, ablation) cell.
#[derive(Clone, Debug, PartialEq)]
pub enum RowStatus {
    Ok(MetricsReport),
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixRow {
    pub testset: String,
    pub ablation: String,
    pub status: RowStatus,
}

impl MatrixRow {
    pub fn report(&self) -> Option<&MetricsReport> {
        match &self.status {
            RowStatus::Ok(r) => Some(r),
            RowStatus::Failed(_) => None,
        }
    }

    pub fn f1(&self) -> Option<f64> {
        self.report().map(|r| r.f1_sweep)
    }
}

/// Per-ablation training summary.
#[derive(Clone, Debug)]
pub struct SpecRun {
    pub spec: AblationSpec,
    pub start_hash: String,
    pub outcome: Result<TrainOutcome, String>,
}

#[derive(Clone, Debug)]
pub struct MatrixReport {
    pub pretrained_hash: String,
    /// The pretrained model on the tuning set's held-out images.
    pub baseline: MatrixRow,
    /// Test set × ablation, in spec order then target order.
    pub rows: Vec<MatrixRow>,
    pub runs: Vec<SpecRun>,
}

impl MatrixReport {
    pub fn failed_rows(&self) -> usize {
        self.rows.iter().filter(|r| matches!(r.status, RowStatus::Failed(_))).count()
    }

    pub fn row(&self, testset: &str, ablation: &str) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.testset == testset && r.ablation == ablation)
    }

    /// `testset,ablation,ap,p,r,f1,status` with the baseline first.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{MATRIX_HEADER}\n");
        for row in std::iter::once(&self.baseline).chain(&self.rows) {
            out.push_str(&matrix_csv_row(row));
            out.push('\n');
        }
        out
    }

    /// Per-threshold rows of every successful cell, baseline first.
    pub fn per_threshold_csv(&self) -> String {
        let mut out = String::from("testset,ablation,iou_t,ap,p,r,f1,tp,fp,fn\n");
        for row in std::iter::once(&self.baseline).chain(&self.rows) {
            if let Some(r) = row.report() {
                out.extend(per_threshold_csv(&row.testset, &row.ablation, r).lines().skip(1).map(|l| format!("{l}\n")));
            }
        }
        out
    }
}

/// One `testset,ablation,ap,p,r,f1,status` line; empty metrics with a
/// marker when nothing passed the gate or the cell failed.
pub fn matrix_csv_row(row: &MatrixRow) -> String {
    let (t, a) = (&row.testset, &row.ablation);
    match &row.status {
        RowStatus::Ok(r) if r.no_predictions => format!("{t},{a},,,,,{NO_PREDICTIONS}"),
        RowStatus::Ok(r) => format!("{t},{a},{:.4},{:.4},{:.4},{:.4},ok", r.ap_sweep, r.precision_sweep, r.recall_sweep, r.f1_sweep),
        RowStatus::Failed(e) => format!("{t},{a},,,,,\"failed: {}\"", e.replace('"', "'")),
    }
}

/// Everything a matrix run needs besides the data.
#[derive(Clone, Debug)]
pub struct MatrixConfig {
    pub trainer: Trainer,
    pub eval: EvalConfig,
    pub jobs: usize,
    /// Per-ablation checkpoints and histories go under `out_dir/<ablation>/`.
    pub out_dir: Option<PathBuf>,
}

/// Worker count: `requested`, capped by the environment variable and by the
/// amount of work.
pub fn worker_count(requested: usize, work: usize) -> usize {
    let cap = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0);
    requested.max(1).min(cap.unwrap_or(usize::MAX)).min(work.max(1))
}

/// Fine-tunes a fresh copy of the pretrained model per spec on `tune_train`
/// (early stopping on `tune_val`) and evaluates it on every target. Failures
/// are confined to that spec's rows.
pub fn run_experiment_matrix(
    arch: &ArchConfig,
    pretrained: &Checkpoint,
    tune_train: &[Sample],
    tune_val: &[Sample],
    targets: &[Dataset],
    specs: &[AblationSpec],
    config: &MatrixConfig,
) -> Result<MatrixReport, ExperimentError> {
    let pretrained_hash = pretrained.content_hash();
    let mut base_model = ModelGraph::build(arch, 0)?;
    base_model.load_checkpoint(pretrained)?;
    let baseline = MatrixRow {
        testset: "tune".into(),
        ablation: "pretrained".into(),
        status: evaluate_model(&base_model, tune_val, &config.eval, &config.trainer.detector)
            .map_or_else(|e| RowStatus::Failed(e.to_string()), RowStatus::Ok),
    };

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<(SpecRun, Vec<MatrixRow>)>>> = Mutex::new(vec![None; specs.len()]);
    let workers = worker_count(config.jobs, specs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&spec) = specs.get(i) else { break };
                let done = run_spec(arch, pretrained, &pretrained_hash, tune_train, tune_val, targets, spec, config);
                results.lock().expect("no worker panics while holding the lock")[i] = Some(done);
            });
        }
    });

    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for (run, r) in results.into_inner().expect("workers joined").into_iter().flatten() {
        runs.push(run);
        rows.extend(r);
    }
    Ok(MatrixReport { pretrained_hash, baseline, rows, runs })
}

#[allow(clippy::too_many_arguments)]
fn run_spec(
    arch: &ArchConfig,
    pretrained: &Checkpoint,
    pretrained_hash: &str,
    tune_train: &[Sample],
    tune_val: &[Sample],
    targets: &[Dataset],
    spec: AblationSpec,
    config: &MatrixConfig,
) -> (SpecRun, Vec<MatrixRow>) {
    let mut start_hash = String::new();
    let attempt = (|| -> Result<(TrainOutcome, ModelGraph), ExperimentError> {
        let mut model = ModelGraph::build(arch, 0)?;
        model.load_checkpoint(pretrained)?;
        start_hash = model.checkpoint().content_hash();
        if start_hash != pretrained_hash {
            return Err(ExperimentError::Isolation { ablation: spec.name().into(), expected: pretrained_hash.into(), found: start_hash.clone() });
        }
        let outcome = config.trainer.train(&mut model, tune_train, tune_val, Some(spec))?;
        if let Some(dir) = &config.out_dir {
            let dir = dir.join(spec.name());
            std::fs::create_dir_all(&dir)?;
            outcome.checkpoint.save(dir.join("model.ckpt")).map_err(ModelError::from)?;
            write_history(dir.join("history.csv"), &outcome.history)?;
        }
        Ok((outcome, model))
    })();

    let rows = |status: &dyn Fn(&Dataset) -> RowStatus| {
        targets.iter().map(|t| MatrixRow { testset: t.name.clone(), ablation: spec.name().into(), status: status(t) }).collect::<Vec<_>>()
    };
    match attempt {
        Ok((outcome, model)) => {
            log::info!("{}: {} iters, best val {:.4} at check {}", spec.name(), outcome.iters_run, outcome.best_val_loss, outcome.best_check);
            let r = rows(&|t| {
                evaluate_model(&model, &t.samples, &config.eval, &config.trainer.detector)
                    .map_or_else(|e| RowStatus::Failed(e.to_string()), RowStatus::Ok)
            });
            (SpecRun { spec, start_hash, outcome: Ok(outcome) }, r)
        }
        Err(e) => {
            log::error!("{}: {e}", spec.name());
            let msg = e.to_string();
            let r = rows(&|_| RowStatus::Failed(msg.clone()));
            (SpecRun { spec, start_hash, outcome: Err(msg) }, r)
        }
    }
}
