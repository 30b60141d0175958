//! Training-target assignment: anchor labelling, proposal generation, ROI
//! sampling and mask targets.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Polygon;

use super::boxes::{clip, iou, nms, BBox, BoxCoder};
use super::ModelError;

/// Sampling and suppression knobs of the detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Highest-scoring anchors kept per level before proposal NMS.
    pub rpn_pre_nms_top_k: usize,
    /// Proposals kept per image after NMS.
    pub rpn_post_nms_top_k: usize,
    pub rpn_nms_iou: f32,
    pub rpn_batch_per_image: usize,
    pub rpn_positive_fraction: f32,
    pub rpn_fg_iou: f32,
    pub rpn_bg_iou: f32,
    pub roi_batch_per_image: usize,
    pub roi_positive_fraction: f32,
    pub roi_fg_iou: f32,
    /// Per-class NMS on final detections.
    pub nms_iou: f32,
    pub detections_per_image: usize,
    /// Proposals narrower or shorter than this (pixels) are dropped.
    pub min_box_size: f32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            rpn_pre_nms_top_k: 400,
            rpn_post_nms_top_k: 200,
            rpn_nms_iou: 0.7,
            rpn_batch_per_image: 64,
            rpn_positive_fraction: 0.5,
            rpn_fg_iou: 0.7,
            rpn_bg_iou: 0.3,
            roi_batch_per_image: 32,
            roi_positive_fraction: 0.25,
            roi_fg_iou: 0.5,
            nms_iou: 0.5,
            detections_per_image: 100,
            min_box_size: 1.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (field, v) in [
            ("rpn_pre_nms_top_k", self.rpn_pre_nms_top_k),
            ("rpn_post_nms_top_k", self.rpn_post_nms_top_k),
            ("rpn_batch_per_image", self.rpn_batch_per_image),
            ("roi_batch_per_image", self.roi_batch_per_image),
            ("detections_per_image", self.detections_per_image),
        ] {
            if v == 0 {
                return Err(ModelError::Config { field, reason: "must be >= 1".into() });
            }
        }
        for (field, v) in [
            ("rpn_nms_iou", self.rpn_nms_iou),
            ("rpn_positive_fraction", self.rpn_positive_fraction),
            ("rpn_fg_iou", self.rpn_fg_iou),
            ("rpn_bg_iou", self.rpn_bg_iou),
            ("roi_positive_fraction", self.roi_positive_fraction),
            ("roi_fg_iou", self.roi_fg_iou),
            ("nms_iou", self.nms_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ModelError::Config { field, reason: "must lie in [0, 1]".into() });
            }
        }
        if self.rpn_bg_iou > self.rpn_fg_iou {
            return Err(ModelError::Config { field: "rpn_bg_iou", reason: "must not exceed rpn_fg_iou".into() });
        }
        if !(self.min_box_size >= 0.0) {
            return Err(ModelError::Config { field: "min_box_size", reason: "must be >= 0".into() });
        }
        Ok(())
    }
}

pub(crate) const RPN_CODER: BoxCoder = BoxCoder { weights: [1.0, 1.0, 1.0, 1.0], scale_clamp: 4.135_166_6 };
pub(crate) const ROI_CODER: BoxCoder = BoxCoder { weights: [10.0, 10.0, 5.0, 5.0], scale_clamp: 4.135_166_6 };

/// Anchor labels: `1` foreground, `0` background, `-1` ignored; plus the
/// matched ground-truth index for each anchor.
pub(crate) fn label_anchors(anchors: &[BBox], gts: &[BBox], cfg: &DetectorConfig) -> (Vec<i8>, Vec<usize>) {
    let mut labels = vec![0i8; anchors.len()];
    let mut matched = vec![0usize; anchors.len()];
    if gts.is_empty() {
        return (labels, matched);
    }
    let mut best_for_gt = vec![0.0f32; gts.len()];
    let ious: Vec<Vec<f32>> = anchors.iter().map(|a| gts.iter().map(|g| iou(a, g)).collect()).collect();
    for (i, row) in ious.iter().enumerate() {
        let (j, &best) = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))).unwrap();
        matched[i] = j;
        labels[i] = if best >= cfg.rpn_fg_iou {
            1
        } else if best < cfg.rpn_bg_iou {
            0
        } else {
            -1
        };
        for (k, &v) in row.iter().enumerate() {
            best_for_gt[k] = best_for_gt[k].max(v);
        }
    }
    // Low-quality matches: every anchor tied for a GT's best IoU is positive.
    for (i, row) in ious.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            if best_for_gt[k] > 0.0 && v == best_for_gt[k] {
                labels[i] = 1;
                matched[i] = k;
            }
        }
    }
    (labels, matched)
}

/// Keeps at most `batch` labelled entries with at most `fraction` positives;
/// the rest become `-1`.
pub(crate) fn subsample<R: Rng + ?Sized>(labels: &mut [i8], batch: usize, fraction: f32, rng: &mut R) {
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_pos = pos.len().min((batch as f32 * fraction) as usize);
    let n_neg = neg.len().min(batch - n_pos);
    pos[n_pos..].iter().chain(&neg[n_neg..]).for_each(|&i| labels[i] = -1);
}

/// Decodes, clips, filters and suppresses one image's RPN outputs.
/// `levels` holds `(anchors, scores, deltas)` per pyramid level with deltas
/// laid out per anchor.
pub(crate) fn propose(levels: &[(Vec<BBox>, Vec<f32>, Vec<[f32; 4]>)], height: usize, width: usize, cfg: &DetectorConfig) -> Vec<BBox> {
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for (anchors, logits, deltas) in levels {
        let mut order: Vec<usize> = (0..anchors.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        order.truncate(cfg.rpn_pre_nms_top_k);
        for i in order {
            let b = clip(&RPN_CODER.decode(&anchors[i], &deltas[i]), height, width);
            if b[2] - b[0] >= cfg.min_box_size && b[3] - b[1] >= cfg.min_box_size && logits[i].is_finite() {
                boxes.push(b);
                scores.push(logits[i]);
            }
        }
    }
    let mut keep = nms(&boxes, &scores, cfg.rpn_nms_iou);
    keep.truncate(cfg.rpn_post_nms_top_k);
    keep.into_iter().map(|i| boxes[i]).collect()
}

/// One sampled region for the ROI heads.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct RoiSample {
    pub bbox: BBox,
    /// `0` for background, otherwise `1..=num_classes`.
    pub class: usize,
    pub gt: Option<usize>,
}

/// Samples training ROIs from proposals plus the ground-truth boxes.
pub(crate) fn sample_rois<R: Rng + ?Sized>(
    proposals: &[BBox],
    gts: &[BBox],
    gt_classes: &[usize],
    cfg: &DetectorConfig,
    rng: &mut R,
) -> Vec<RoiSample> {
    let candidates: Vec<BBox> = proposals.iter().chain(gts).copied().collect();
    let mut labels = vec![0i8; candidates.len()];
    let mut matched = vec![0usize; candidates.len()];
    for (i, c) in candidates.iter().enumerate() {
        if let Some((j, v)) = gts.iter().map(|g| iou(c, g)).enumerate().max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0))) {
            matched[i] = j;
            labels[i] = i8::from(v >= cfg.roi_fg_iou);
        }
    }
    subsample(&mut labels, cfg.roi_batch_per_image, cfg.roi_positive_fraction, rng);
    let mut out: Vec<RoiSample> = (0..candidates.len())
        .filter(|&i| labels[i] >= 0)
        .map(|i| {
            let fg = labels[i] == 1;
            RoiSample { bbox: candidates[i], class: if fg { gt_classes[matched[i]] } else { 0 }, gt: fg.then_some(matched[i]) }
        })
        .collect();
    // Foreground first keeps the mask head's inputs a prefix.
    out.sort_by_key(|s| s.class == 0);
    out
}

/// Pyramid level (2..=5) whose anchor size best matches a box.
pub(crate) fn roi_level(b: &BBox, anchor_scale: f32) -> usize {
    let s = ((b[2] - b[0]).max(1e-3) * (b[3] - b[1]).max(1e-3)).sqrt();
    let l = (s / anchor_scale).log2().floor();
    l.clamp(2.0, 5.0) as usize
}

/// `m x m` binary target: a cell is on when its centre lies inside the
/// union of the instance polygons.
pub(crate) fn mask_target(polygons: &[Polygon], b: &BBox, m: usize) -> Vec<f32> {
    let bw = (b[2] - b[0]) as f64 / m as f64;
    let bh = (b[3] - b[1]) as f64 / m as f64;
    let mut out = vec![0.0f32; m * m];
    for i in 0..m {
        let y = b[1] as f64 + (i as f64 + 0.5) * bh;
        for j in 0..m {
            let x = b[0] as f64 + (j as f64 + 0.5) * bw;
            if polygons.iter().any(|p| p.contains(x, y)) {
                out[i * m + j] = 1.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn anchors_labelled_by_iou() {
        let cfg = DetectorConfig::default();
        let anchors = vec![[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 9.0, 10.0], [50.0, 50.0, 60.0, 60.0], [3.0, 0.0, 13.0, 10.0]];
        let (labels, matched) = label_anchors(&anchors, &[[0.0, 0.0, 10.0, 10.0]], &cfg);
        assert_eq!(labels, vec![1, 1, 0, -1]);
        assert_eq!(matched[0], 0);
    }

    #[test]
    fn best_anchor_is_positive_even_below_threshold() {
        let cfg = DetectorConfig::default();
        let anchors = vec![[0.0, 0.0, 10.0, 10.0], [40.0, 40.0, 50.0, 50.0]];
        let (labels, _) = label_anchors(&anchors, &[[0.0, 0.0, 20.0, 20.0]], &cfg);
        assert_eq!(labels, vec![1, 0]);
    }

    #[test]
    fn subsample_respects_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut labels = vec![1i8; 50];
        labels.extend(vec![0i8; 200]);
        subsample(&mut labels, 64, 0.5, &mut rng);
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 32);
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 32);
    }

    #[test]
    fn rois_without_gt_are_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let props = vec![[0.0, 0.0, 5.0, 5.0]; 10];
        let s = sample_rois(&props, &[], &[], &DetectorConfig::default(), &mut rng);
        assert_eq!(s.len(), 10);
        assert!(s.iter().all(|r| r.class == 0 && r.gt.is_none()));
    }

    #[test]
    fn gt_boxes_are_always_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_rois(&[], &[[1.0, 1.0, 9.0, 9.0]], &[1], &DetectorConfig::default(), &mut rng);
        assert_eq!(s, vec![RoiSample { bbox: [1.0, 1.0, 9.0, 9.0], class: 1, gt: Some(0) }]);
    }

    #[test]
    fn levels_follow_box_size() {
        assert_eq!(roi_level(&[0.0, 0.0, 8.0, 8.0], 2.0), 2);
        assert_eq!(roi_level(&[0.0, 0.0, 16.0, 16.0], 2.0), 3);
        assert_eq!(roi_level(&[0.0, 0.0, 500.0, 500.0], 2.0), 5);
        assert_eq!(roi_level(&[0.0, 0.0, 224.0, 224.0], 8.0), 4);
    }

    #[test]
    fn mask_target_of_covering_square_is_full() {
        let sq = Polygon::new(vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]]);
        let t = mask_target(std::slice::from_ref(&sq), &[2.0, 2.0, 8.0, 8.0], 4);
        assert!(t.iter().all(|&v| v == 1.0));
        let half = mask_target(&[sq], &[5.0, 0.0, 15.0, 10.0], 4);
        assert_eq!(half.iter().sum::<f32>(), 8.0);
    }
}
