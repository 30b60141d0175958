//! Pre-trains the mini model briefly, then fine-tunes one ablation on a
//! recoloured domain and shows which parameter groups moved.
//!
//! ```text
//! cargo run --example surgical_finetune -- [ABLATION] [ITERS]
//! ```

use std::collections::BTreeMap;

use scalpel_seg::experiment::{evaluate_model, EvalConfig};
use scalpel_seg::model::{ArchConfig, ModelGraph};
use scalpel_seg::surgery::{ledger, AblationSpec};
use scalpel_seg::synth::{generate, ShiftKind, ShiftSpec};
use scalpel_seg::train::{TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let spec: AblationSpec = args.next().as_deref().unwrap_or("res3").parse()?;
    let iters: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(300);

    let source = generate(60, [1, 3], 64, &ShiftSpec::none(1))?;
    let shift = ShiftSpec::new(ShiftKind::FeatureLevel { hue: -90.0, size: 0.0, texture: 0.0 }, 1.0, 2)?;
    let target = generate(30, [1, 3], 64, &shift)?;
    let (tune, held_out) = target.samples.split_at(20);

    let arch = ArchConfig::mini();
    let mut model = ModelGraph::build(&arch, 0)?;
    let pre = Trainer::new(TrainConfig { max_iters: 2 * iters, ..TrainConfig::desk() });
    pre.train(&mut model, &source.samples[..50], &source.samples[50..], None)?;
    let before = model.checkpoint();
    let eval = EvalConfig::default();
    let f1_before = evaluate_model(&model, held_out, &eval, &pre.detector)?.f1_sweep;

    let out = Trainer::new(TrainConfig { max_iters: iters, ..TrainConfig::desk() }).train(&mut model, tune, held_out, Some(spec))?;
    let f1_after = evaluate_model(&model, held_out, &eval, &pre.detector)?.f1_sweep;
    println!("{spec}: {} iters, best val loss {:.4}; held-out F1 {f1_before:.3} -> {f1_after:.3}", out.iters_run, out.best_val_loss);

    let mut per_group: BTreeMap<String, usize> = BTreeMap::new();
    for (path, changed) in before.diff(&out.checkpoint) {
        if let Some(p) = model.param(&path) {
            *per_group.entry(p.group.to_string()).or_default() += changed;
        }
    }
    for (group, n) in &per_group {
        println!("  {group:<10} {n:>8} scalars changed");
    }
    println!("total changed {} (ledger {})", per_group.values().sum::<usize>(), ledger(&model, spec));
    Ok(())
}
