//! Scores a jittered copy of a synthetic set's ground truth as if it were
//! model output, printing the metrics at every IoU threshold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scalpel_seg::geometry::Mask;
use scalpel_seg::metrics::{evaluate, ImageEval, ScoredMask, ThresholdStep, DEFAULT_SCORE_GATE};
use scalpel_seg::synth::{generate, ShiftSpec};

/// Moves a mask by up to `max` pixels in each direction.
fn jitter(m: &Mask, rng: &mut impl Rng, max: i64) -> Mask {
    let (dy, dx) = (rng.random_range(-max..=max), rng.random_range(-max..=max));
    let mut out = Mask::new(m.height(), m.width());
    for r in 0..m.height() {
        for c in 0..m.width() {
            let (sr, sc) = (r as i64 - dy, c as i64 - dx);
            if sr >= 0 && sc >= 0 && (sr as usize) < m.height() && (sc as usize) < m.width() && m.get(sr as usize, sc as usize) {
                out.set(r, c, true);
            }
        }
    }
    out
}

fn main() -> anyhow::Result<()> {
    let data = generate(40, [1, 4], 64, &ShiftSpec::none(3))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images: Vec<ImageEval> = data
        .samples
        .iter()
        .map(|s| {
            let gts: Vec<Mask> = s.instances.iter().map(|i| i.mask(64, 64)).collect();
            let mut preds = Vec::new();
            for g in &gts {
                if rng.random::<f64>() < 0.85 {
                    preds.push(ScoredMask { score: rng.random_range(0.8..1.0), mask: jitter(g, &mut rng, 2) });
                }
            }
            if rng.random::<f64>() < 0.3 {
                // A spurious detection somewhere else.
                let mut m = Mask::new(64, 64);
                let (r, c) = (rng.random_range(0..56), rng.random_range(0..56));
                (r..r + 8).for_each(|y| (c..c + 8).for_each(|x| m.set(y, x, true)));
                preds.push(ScoredMask { score: rng.random_range(0.9..1.0), mask: m });
            }
            ImageEval { gts, preds }
        })
        .collect();

    let r = evaluate(&images, &ThresholdStep::Fine.thresholds(), DEFAULT_SCORE_GATE)?;
    println!("{:>6} {:>7} {:>7} {:>7} {:>7} {:>4} {:>4} {:>4}", "iou_t", "ap", "p", "r", "f1", "tp", "fp", "fn");
    for t in &r.per_threshold {
        println!("{:>6.2} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>4} {:>4} {:>4}", t.iou_t, t.ap, t.precision, t.recall, t.f1, t.tp, t.fp, t.fn_);
    }
    println!(
        "sweep: ap {:.4} p {:.4} r {:.4} f1 {:.4} (mean per-threshold f1 {:.4})",
        r.ap_sweep, r.precision_sweep, r.recall_sweep, r.f1_sweep, r.f1_mean
    );
    Ok(())
}
