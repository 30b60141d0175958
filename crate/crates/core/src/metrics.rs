//! Mask IoU, confidence-gated greedy matching, all-points AP and the
//! threshold-swept precision / recall / F1 report.

use serde::{Deserialize, Serialize};

use crate::geometry::Mask;
use crate::model::Detection;
use crate::sample::Sample;

/// Predictions must score strictly above this to be evaluated.
pub const DEFAULT_SCORE_GATE: f32 = 0.9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("mask sizes differ: {a:?} vs {b:?}")]
    DimMismatch { a: (usize, usize), b: (usize, usize) },
}

pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64, MetricsError> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(MetricsError::DimMismatch { a: (a.height(), a.width()), b: (b.height(), b.width()) });
    }
    let inter = a.intersection_count(b);
    let union = a.count() + b.count() - inter;
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Spacing of the IoU threshold grid over `[0.30, 0.90]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdStep {
    #[default]
    Fine,
    Coarse,
}

impl ThresholdStep {
    /// `0.30, 0.35, ..., 0.90` (13 values) or `0.30, 0.40, ..., 0.90` (7),
    /// computed from integer percentages so every value is exact.
    pub fn thresholds(self) -> Vec<f64> {
        let step = match self {
            ThresholdStep::Fine => 5,
            ThresholdStep::Coarse => 10,
        };
        (30..=90).step_by(step).map(|p| p as f64 / 100.0).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredMask {
    pub score: f32,
    pub mask: Mask,
}

/// Ground truth and predictions for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEval {
    pub gts: Vec<Mask>,
    pub preds: Vec<ScoredMask>,
}

impl ImageEval {
    /// Pastes detections into image space and rasterises the annotations.
    pub fn from_detections(sample: &Sample, detections: &[Detection]) -> Self {
        let (h, w) = (sample.image.height, sample.image.width);
        Self {
            gts: sample.instances.iter().map(|i| i.mask(h, w)).collect(),
            preds: detections.iter().map(|d| ScoredMask { score: d.score, mask: d.paste(h, w) }).collect(),
        }
    }

    fn iou_matrix(&self) -> Result<Vec<Vec<f64>>, MetricsError> {
        self.preds.iter().map(|p| self.gts.iter().map(|g| mask_iou(&p.mask, g)).collect()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Per prediction: the matched GT, or `None` if unmatched or gated out.
    pub assignment: Vec<Option<usize>>,
    /// Per prediction: whether it passed the score gate.
    pub kept: Vec<bool>,
}

/// Order in which surviving predictions are matched: descending score,
/// then ascending index.
fn gated_order(scores: &[f32], floor: f32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > floor).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn greedy(ious: &[Vec<f64>], n_gt: usize, scores: &[f32], iou_t: f64, floor: f32) -> MatchResult {
    let mut taken = vec![false; n_gt];
    let mut assignment = vec![None; scores.len()];
    let kept: Vec<bool> = scores.iter().map(|&s| s > floor).collect();
    let mut tp = 0;
    let order = gated_order(scores, floor);
    for &p in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, &v) in ious[p].iter().enumerate() {
            if !taken[g] && v >= iou_t && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            assignment[p] = Some(g);
            tp += 1;
        }
    }
    MatchResult { tp, fp: order.len() - tp, fn_: n_gt - tp, assignment, kept }
}

/// One-to-one greedy matching of gated predictions to ground truth.
pub fn match_instances(preds: &[ScoredMask], gts: &[Mask], iou_t: f64, score_floor: f32) -> Result<MatchResult, MetricsError> {
    let ious: Vec<Vec<f64>> = preds.iter().map(|p| gts.iter().map(|g| mask_iou(&p.mask, g)).collect()).collect::<Result<_, _>>()?;
    let scores: Vec<f32> = preds.iter().map(|p| p.score).collect();
    Ok(greedy(&ious, gts.len(), &scores, iou_t, score_floor))
}

/// All-points area under the precision/recall curve of pooled, gated
/// predictions. `flags` holds `(score, is_tp)`.
pub fn average_precision_from_flags(flags: &[(f32, bool)], total_gt: usize) -> f64 {
    if flags.is_empty() || total_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&a, &b| flags[b].0.total_cmp(&flags[a].0).then(a.cmp(&b)));
    let mut points = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (k, &i) in order.iter().enumerate() {
        tp += usize::from(flags[i].1);
        points.push((tp as f64 / total_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    let mut envelope = vec![0.0; points.len()];
    let mut run = 0.0f64;
    for (k, p) in points.iter().enumerate().rev() {
        run = run.max(p.1);
        envelope[k] = run;
    }
    for (k, &(r, _)) in points.iter().enumerate() {
        ap += (r - prev_r) * envelope[k];
        prev_r = r;
    }
    ap
}

pub fn average_precision(images: &[ImageEval], iou_t: f64, score_floor: f32) -> Result<f64, MetricsError> {
    let mut flags = Vec::new();
    let mut total_gt = 0;
    for im in images {
        let ious = im.iou_matrix()?;
        let scores: Vec<f32> = im.preds.iter().map(|p| p.score).collect();
        let m = greedy(&ious, im.gts.len(), &scores, iou_t, score_floor);
        total_gt += im.gts.len();
        for (i, p) in im.preds.iter().enumerate() {
            if m.kept[i] {
                flags.push((p.score, m.assignment[i].is_some()));
            }
        }
    }
    Ok(average_precision_from_flags(&flags, total_gt))
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub iou_t: f64,
    pub ap: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap_sweep: f64,
    pub precision_sweep: f64,
    pub recall_sweep: f64,
    /// Harmonic mean of `precision_sweep` and `recall_sweep`.
    pub f1_sweep: f64,
    /// Arithmetic mean of the per-threshold F1 values.
    pub f1_mean: f64,
    pub per_threshold: Vec<ThresholdMetrics>,
    /// No prediction passed the score gate anywhere in the set.
    pub no_predictions: bool,
}

/// Metrics at every threshold plus their means.
pub fn evaluate(images: &[ImageEval], thresholds: &[f64], score_floor: f32) -> Result<MetricsReport, MetricsError> {
    let mats: Vec<Vec<Vec<f64>>> = images.iter().map(ImageEval::iou_matrix).collect::<Result<_, _>>()?;
    let total_gt: usize = images.iter().map(|im| im.gts.len()).sum();
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    let mut any_kept = false;
    for &t in thresholds {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        let mut flags = Vec::new();
        for (im, ious) in images.iter().zip(&mats) {
            let scores: Vec<f32> = im.preds.iter().map(|p| p.score).collect();
            let m = greedy(ious, im.gts.len(), &scores, t, score_floor);
            tp += m.tp;
            fp += m.fp;
            fn_ += m.fn_;
            for (i, &s) in scores.iter().enumerate() {
                if m.kept[i] {
                    any_kept = true;
                    flags.push((s, m.assignment[i].is_some()));
                }
            }
        }
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 };
        per_threshold.push(ThresholdMetrics {
            iou_t: t,
            ap: average_precision_from_flags(&flags, total_gt),
            precision,
            recall,
            f1: f1(precision, recall),
            tp,
            fp,
            fn_,
        });
    }
    let mean = |f: fn(&ThresholdMetrics) -> f64| {
        if per_threshold.is_empty() {
            0.0
        } else {
            per_threshold.iter().map(f).sum::<f64>() / per_threshold.len() as f64
        }
    };
    let precision_sweep = mean(|m| m.precision);
    let recall_sweep = mean(|m| m.recall);
    Ok(MetricsReport {
        ap_sweep: mean(|m| m.ap),
        precision_sweep,
        recall_sweep,
        f1_sweep: f1(precision_sweep, recall_sweep),
        f1_mean: mean(|m| m.f1),
        per_threshold,
        no_predictions: !any_kept,
    })
}

pub const SUMMARY_HEADER: &str = "testset,ablation,ap,p,r,f1";

pub fn summary_row(testset: &str, ablation: &str, r: &MetricsReport) -> String {
    format!("{testset},{ablation},{:.4},{:.4},{:.4},{:.4}", r.ap_sweep, r.precision_sweep, r.recall_sweep, r.f1_sweep)
}

pub fn per_threshold_csv(testset: &str, ablation: &str, r: &MetricsReport) -> String {
    let mut out = String::from("testset,ablation,iou_t,ap,p,r,f1,tp,fp,fn\n");
    for m in &r.per_threshold {
        out.push_str(&format!(
            "{testset},{ablation},{:.2},{:.4},{:.4},{:.4},{:.4},{},{},{}\n",
            m.iou_t, m.ap, m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_
        ));
    }
    out
}
