//! Brute-force references for matching and AP on small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scalpel_seg::geometry::Mask;
use scalpel_seg::metrics::{average_precision, evaluate, match_instances, ImageEval, ScoredMask, ThresholdStep, DEFAULT_SCORE_GATE};

const SIDE: usize = 10;

/// Pixel sets as plain index lists, kept next to the masks for the oracle.
struct Shape {
    pixels: Vec<usize>,
    mask: Mask,
}

fn random_shape(rng: &mut ChaCha8Rng) -> Shape {
    let (r0, c0) = (rng.random_range(0..SIDE - 2), rng.random_range(0..SIDE - 2));
    let (r1, c1) = (rng.random_range(r0 + 1..=SIDE), rng.random_range(c0 + 1..=SIDE));
    let mut mask = Mask::new(SIDE, SIDE);
    let mut pixels = Vec::new();
    for r in r0..r1 {
        for c in c0..c1 {
            // Occasional holes so shapes are not all rectangles.
            if rng.random_range(0..8) != 0 {
                mask.set(r, c, true);
                pixels.push(r * SIDE + c);
            }
        }
    }
    Shape { pixels, mask }
}

fn oracle_iou(a: &Shape, b: &Shape) -> f64 {
    let inter = a.pixels.iter().filter(|p| b.pixels.contains(p)).count();
    let union = a.pixels.len() + b.pixels.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Every partial injective assignment of kept predictions to GTs at or above
/// the threshold. Greedy matching is the assignment whose per-prediction
/// (IoU, lower GT index) keys, read in descending score order, are
/// lexicographically largest.
fn oracle_assignment(ious: &[Vec<f64>], order: &[usize], n_gt: usize, t: f64) -> Vec<Option<usize>> {
    fn key(ious: &[Vec<f64>], order: &[usize], a: &[Option<usize>]) -> Vec<(f64, i64)> {
        order.iter().map(|&p| a[p].map_or((-1.0, 0), |g| (ious[p][g], -(g as i64)))).collect()
    }
    fn search(
        k: usize,
        ious: &[Vec<f64>],
        order: &[usize],
        n_gt: usize,
        t: f64,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        best: &mut Option<(Vec<(f64, i64)>, Vec<Option<usize>>)>,
    ) {
        if k == order.len() {
            let kv = key(ious, order, cur);
            if best.as_ref().is_none_or(|(bk, _)| kv.partial_cmp(bk) == Some(std::cmp::Ordering::Greater)) {
                *best = Some((kv, cur.clone()));
            }
            return;
        }
        let p = order[k];
        search(k + 1, ious, order, n_gt, t, used, cur, best);
        for g in 0..n_gt {
            if !used[g] && ious[p][g] >= t {
                used[g] = true;
                cur[p] = Some(g);
                search(k + 1, ious, order, n_gt, t, used, cur, best);
                cur[p] = None;
                used[g] = false;
            }
        }
    }
    let mut best = None;
    let mut cur = vec![None; ious.len()];
    search(0, ious, order, n_gt, t, &mut vec![false; n_gt], &mut cur, &mut best);
    best.map(|b| b.1).unwrap_or(cur)
}

/// Descending score, ties by index, gated strictly above the floor.
fn oracle_order(scores: &[f32], floor: f32) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // Insertion sort, deliberately unlike the library's sort call.
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && scores[idx[j - 1]] < scores[idx[j]] {
            idx.swap(j - 1, j);
            j -= 1;
        }
    }
    idx.into_iter().filter(|&i| scores[i] > floor).collect()
}

/// AP as the sum, over true-positive ranks, of the best precision at that
/// rank or any later one, divided by the GT count.
fn oracle_ap(flags: &[(f32, bool)], total_gt: usize) -> f64 {
    if total_gt == 0 || flags.is_empty() {
        return 0.0;
    }
    let scores: Vec<f32> = flags.iter().map(|f| f.0).collect();
    let order = oracle_order(&scores, f32::NEG_INFINITY);
    let hits: Vec<bool> = order.iter().map(|&i| flags[i].1).collect();
    let precision_at = |k: usize| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64;
    let mut ap = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            let best = (k..hits.len()).map(precision_at).fold(0.0, f64::max);
            ap += best / total_gt as f64;
        }
    }
    ap
}

pub struct Instance {
    images: Vec<(Vec<Shape>, Vec<(f32, Shape)>)>,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_images = rng.random_range(1..=3);
    let images = (0..n_images)
        .map(|_| {
            let gts = (0..rng.random_range(0..=6)).map(|_| random_shape(&mut rng)).collect();
            let preds = (0..rng.random_range(0..=6))
                .map(|_| {
                    // Coarse score grid: ties and gate-boundary values occur.
                    let score = [0.85f32, 0.9, 0.92, 0.95, 0.95, 0.99, 1.0][rng.random_range(0..7)];
                    (score, random_shape(&mut rng))
                })
                .collect();
            (gts, preds)
        })
        .collect();
    Instance { images }
}

/// Compares the library with the oracles at every sweep threshold. Returns
/// a description of the first disagreement.
pub fn check_instance(inst: &Instance) -> Result<(), String> {
    let floor = DEFAULT_SCORE_GATE;
    let thresholds = ThresholdStep::Fine.thresholds();
    let evals: Vec<ImageEval> = inst
        .images
        .iter()
        .map(|(gts, preds)| ImageEval {
            gts: gts.iter().map(|g| g.mask.clone()).collect(),
            preds: preds.iter().map(|(s, p)| ScoredMask { score: *s, mask: p.mask.clone() }).collect(),
        })
        .collect();
    let report = evaluate(&evals, &thresholds, floor).map_err(|e| e.to_string())?;
    let total_gt: usize = inst.images.iter().map(|i| i.0.len()).sum();

    for (ti, &t) in thresholds.iter().enumerate() {
        let (mut tp, mut fp) = (0, 0);
        let mut flags = Vec::new();
        for ((gts, preds), ev) in inst.images.iter().zip(&evals) {
            let ious: Vec<Vec<f64>> = preds.iter().map(|(_, p)| gts.iter().map(|g| oracle_iou(p, g)).collect()).collect();
            let scores: Vec<f32> = preds.iter().map(|p| p.0).collect();
            let order = oracle_order(&scores, floor);
            let expect = oracle_assignment(&ious, &order, gts.len(), t);
            let got = match_instances(&ev.preds, &ev.gts, t, floor).map_err(|e| e.to_string())?;
            if got.assignment != expect {
                return Err(format!("iou_t {t}: assignment {:?} != oracle {expect:?}", got.assignment));
            }
            let matched = expect.iter().filter(|a| a.is_some()).count();
            tp += matched;
            fp += order.len() - matched;
            flags.extend(order.iter().map(|&p| (scores[p], expect[p].is_some())));
        }
        let m = &report.per_threshold[ti];
        if (m.tp, m.fp, m.fn_) != (tp, fp, total_gt - tp) {
            return Err(format!("iou_t {t}: counts {:?} != oracle {:?}", (m.tp, m.fp, m.fn_), (tp, fp, total_gt - tp)));
        }
        let ap = oracle_ap(&flags, total_gt);
        let lib_ap = average_precision(&evals, t, floor).map_err(|e| e.to_string())?;
        if (m.ap - ap).abs() > 1e-12 || (lib_ap - ap).abs() > 1e-12 {
            return Err(format!("iou_t {t}: ap {} / {lib_ap} != oracle {ap}", m.ap));
        }
    }
    Ok(())
}

pub const CASES: u64 = 200;

/// Number of instances checked and the failures among them.
pub fn run_all() -> (u64, Vec<String>) {
    let failures = (0..CASES).filter_map(|s| check_instance(&random_instance(s)).err().map(|e| format!("case {s}: {e}"))).collect();
    (CASES, failures)
}
