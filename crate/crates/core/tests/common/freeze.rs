//! Frozen parameters must not move while the trainable ones are updated.

use scalpel_seg::model::{ArchConfig, ModelGraph};
use scalpel_seg::sample::Sample;
use scalpel_seg::surgery::{ledger, AblationSpec};
use scalpel_seg::synth::{generate, ShiftSpec};
use scalpel_seg::train::{TrainConfig, Trainer};

pub const STEPS: usize = 100;

pub struct FreezeResult {
    pub spec: AblationSpec,
    /// Scalars that changed in parameters marked frozen.
    pub frozen_changed: usize,
    pub changed: usize,
    pub ledger: usize,
}

impl FreezeResult {
    pub fn sound(&self) -> bool {
        self.frozen_changed == 0 && self.changed <= self.ledger && self.changed > 0
    }
}

pub fn data() -> Vec<Sample> {
    generate(6, [1, 3], 32, &ShiftSpec::none(11)).expect("valid synthetic config").samples
}

pub fn run(spec: AblationSpec, samples: &[Sample]) -> FreezeResult {
    let arch = ArchConfig::mini();
    let mut model = ModelGraph::build(&arch, 5).expect("mini model builds");
    let before: Vec<Vec<u32>> = model.params().iter().map(|p| p.tensor.data().iter().map(|v| v.to_bits()).collect()).collect();
    let config = TrainConfig { batch_size: 2, max_iters: STEPS, eval_interval_iters: STEPS, patience_checks: 1, seed: 3, ..TrainConfig::desk() };
    Trainer::new(config).train(&mut model, samples, &samples[..2], Some(spec)).expect("training runs");

    let (mut frozen_changed, mut changed) = (0, 0);
    for (p, old) in model.params().iter().zip(&before) {
        let moved = p.tensor.data().iter().zip(old).filter(|(v, o)| v.to_bits() != **o).count();
        changed += moved;
        if !p.trainable {
            frozen_changed += moved;
        }
    }
    FreezeResult { spec, frozen_changed, changed, ledger: ledger(&model, spec) }
}

pub fn run_all() -> Vec<FreezeResult> {
    let samples = data();
    AblationSpec::ALL.iter().map(|&s| run(s, &samples)).collect()
}
