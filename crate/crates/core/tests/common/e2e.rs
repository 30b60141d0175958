//! The two-stage experiment on the synthetic shift suite, reduced to the
//! sets the directional checks need.

use scalpel_seg::coco::{split, Dataset};
use scalpel_seg::experiment::{run_experiment_matrix, EvalConfig, MatrixConfig};
use scalpel_seg::model::{ArchConfig, ModelGraph};
use scalpel_seg::surgery::AblationSpec;
use scalpel_seg::synth::{shift_suite, SuiteConfig};
use scalpel_seg::train::{TrainConfig, Trainer};

pub const SCALE: f64 = 0.5;
pub const PRETRAIN_ITERS: usize = 2000;
pub const FINETUNE_ITERS: usize = 1500;
pub const FEATURE_TARGETS: [&str; 2] = ["C", "O"];

/// Every ablation that tunes one stage of the network.
pub fn single_stage(spec: AblationSpec) -> bool {
    !matches!(spec, AblationSpec::TuneAll | AblationSpec::LinearProbing)
}

pub struct SeedResult {
    pub seed: u64,
    pub baseline_f1: f64,
    /// `(ablation, tune F1, [F1 on each feature-level target])`; `None`
    /// where the model made no prediction above the gate.
    pub rows: Vec<(AblationSpec, Option<f64>, Vec<Option<f64>>)>,
}

impl SeedResult {
    /// Smallest margin of any fine-tuned configuration over the baseline.
    pub fn worst_margin(&self) -> f64 {
        self.rows.iter().map(|r| r.1.unwrap_or(0.0) - self.baseline_f1).fold(f64::INFINITY, f64::min)
    }

    /// Best single-stage F1 minus linear probing's, on target `k`.
    pub fn surgical_margin(&self, k: usize) -> (AblationSpec, f64) {
        let lp = self.rows.iter().find(|r| r.0 == AblationSpec::LinearProbing).and_then(|r| r.2[k]).unwrap_or(0.0);
        let (spec, best) = self
            .rows
            .iter()
            .filter(|r| single_stage(r.0))
            .map(|r| (r.0, r.2[k].unwrap_or(0.0)))
            .fold((AblationSpec::Stem, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        (spec, best - lp)
    }
}

pub fn run_seed(seed: u64) -> anyhow::Result<SeedResult> {
    let suite = shift_suite(&SuiteConfig { seed, scale: SCALE, ..SuiteConfig::default() })?;
    let arch = ArchConfig::mini();
    let eval = EvalConfig::default();

    let (src_train, src_val) = split(&suite.source, 0.1, seed)?;
    let mut model = ModelGraph::build(&arch, seed)?;
    let pre = Trainer::new(TrainConfig { max_iters: PRETRAIN_ITERS, eval_interval_iters: 50, patience_checks: 10, seed, ..TrainConfig::desk() });
    let pretrained = pre.train(&mut model, &src_train.samples, &src_val.samples, None)?.checkpoint;

    let (tune_train, tune_val) = split(&suite.tune, 0.25, seed)?;
    let mut targets: Vec<Dataset> = vec![Dataset { name: "tune".into(), ..tune_val.clone() }];
    for name in FEATURE_TARGETS {
        targets.push(suite.target(name).expect("suite has every target").clone());
    }
    let config = MatrixConfig {
        trainer: Trainer::new(TrainConfig { max_iters: FINETUNE_ITERS, patience_checks: 10, seed, ..TrainConfig::desk() }),
        eval,
        jobs: 1,
        out_dir: None,
    };
    let report = run_experiment_matrix(&arch, &pretrained, &tune_train.samples, &tune_val.samples, &targets, &AblationSpec::ALL, &config)?;
    let f1 = |set: &str, spec: AblationSpec| report.row(set, spec.name()).and_then(|r| r.report()).filter(|r| !r.no_predictions).map(|r| r.f1_sweep);
    let baseline_f1 = report.baseline.f1().unwrap_or(0.0);
    let rows = AblationSpec::ALL.iter().map(|&s| (s, f1("tune", s), FEATURE_TARGETS.iter().map(|t| f1(t, s)).collect())).collect();
    Ok(SeedResult { seed, baseline_f1, rows })
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
