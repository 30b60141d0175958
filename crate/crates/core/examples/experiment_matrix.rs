//! Full two-stage experiment at desk scale: synthesise the shift suite,
//! pre-train on the source set, then fine-tune under every ablation and
//! evaluate on the held-out tuning images and the five target sets.
//!
//! ```text
//! cargo run --example experiment_matrix -- [SEED] [SCALE] [PRETRAIN_ITERS] [FINETUNE_ITERS] [PRETRAINED_CKPT]
//! ```
//!
//! When `PRETRAINED_CKPT` exists it is loaded instead of pre-training;
//! otherwise the pre-trained weights are written there.

use std::time::Instant;

use scalpel_seg::autodiff::Checkpoint;
use scalpel_seg::coco::{split, Dataset};
use scalpel_seg::experiment::{evaluate_model, run_experiment_matrix, EvalConfig, MatrixConfig};
use scalpel_seg::model::{ArchConfig, ModelGraph};
use scalpel_seg::surgery::AblationSpec;
use scalpel_seg::synth::{shift_suite, SuiteConfig};
use scalpel_seg::train::{TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let scale: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.25);
    let pretrain_iters: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1500);
    let finetune_iters: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(400);
    let cache = args.next().map(std::path::PathBuf::from);

    let t0 = Instant::now();
    let suite = shift_suite(&SuiteConfig { seed, scale, ..SuiteConfig::default() })?;
    let arch = ArchConfig::mini();
    let eval = EvalConfig::default();

    let (src_train, src_val) = split(&suite.source, 0.1, seed)?;
    let mut model = ModelGraph::build(&arch, seed)?;
    let pre = Trainer::new(TrainConfig { max_iters: pretrain_iters, eval_interval_iters: 50, patience_checks: 10, seed, ..TrainConfig::desk() });
    let pretrained = match &cache {
        Some(path) if path.exists() => Checkpoint::load(path)?,
        _ => {
            let out = pre.train(&mut model, &src_train.samples, &src_val.samples, None)?;
            println!("pretrain: {} iters, best val {:.4} ({:.0}s)", out.iters_run, out.best_val_loss, t0.elapsed().as_secs_f64());
            if let Some(path) = &cache {
                out.checkpoint.save(path)?;
            }
            out.checkpoint
        }
    };
    model.load_checkpoint(&pretrained)?;
    for d in suite.all() {
        let r = evaluate_model(&model, &d.samples, &eval, &pre.detector)?;
        println!("  pretrained on {:<6} ap {:.3} p {:.3} r {:.3} f1 {:.3}", d.name, r.ap_sweep, r.precision_sweep, r.recall_sweep, r.f1_sweep);
    }

    let (tune_train, tune_val) = split(&suite.tune, 0.25, seed)?;
    let mut targets: Vec<Dataset> = vec![Dataset { name: "tune".into(), ..tune_val.clone() }];
    targets.extend(suite.targets.iter().cloned());
    let config = MatrixConfig {
        trainer: Trainer::new(TrainConfig { max_iters: finetune_iters, patience_checks: 10, seed, ..TrainConfig::desk() }),
        eval,
        jobs: 1,
        out_dir: None,
    };
    let report = run_experiment_matrix(&arch, &pretrained, &tune_train.samples, &tune_val.samples, &targets, &AblationSpec::ALL, &config)?;
    for run in &report.runs {
        if let Ok(o) = &run.outcome {
            println!("{:<15} iters {:>5}  best check {:>3}  val {:.4}", run.spec.name(), o.iters_run, o.best_check, o.best_val_loss);
        }
    }
    print!("{}", report.to_csv());
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
    Ok(())
}
