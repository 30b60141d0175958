//! Box arithmetic, anchor generation and non-maximum suppression.

/// `[x1, y1, x2, y2]` in image pixels.
pub type BBox = [f32; 4];

pub fn area(b: &BBox) -> f32 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn clip(b: &BBox, height: usize, width: usize) -> BBox {
    let (w, h) = (width as f32, height as f32);
    [b[0].clamp(0.0, w), b[1].clamp(0.0, h), b[2].clamp(0.0, w), b[3].clamp(0.0, h)]
}

/// `(dx, dy, dw, dh)` parameterisation relative to a reference box, with
/// log-space width/height and per-coordinate weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoder {
    pub weights: [f32; 4],
    /// Upper bound on decoded `dw`/`dh` before exponentiation.
    pub scale_clamp: f32,
}

impl BoxCoder {
    pub fn new(weights: [f32; 4]) -> Self {
        Self { weights, scale_clamp: (1000.0f32 / 16.0).ln() }
    }

    pub fn encode(&self, reference: &BBox, target: &BBox) -> [f32; 4] {
        let (rw, rh) = (reference[2] - reference[0], reference[3] - reference[1]);
        let (rx, ry) = (reference[0] + 0.5 * rw, reference[1] + 0.5 * rh);
        let (tw, th) = (target[2] - target[0], target[3] - target[1]);
        let (tx, ty) = (target[0] + 0.5 * tw, target[1] + 0.5 * th);
        let [wx, wy, ww, wh] = self.weights;
        [wx * (tx - rx) / rw, wy * (ty - ry) / rh, ww * (tw / rw).ln(), wh * (th / rh).ln()]
    }

    pub fn decode(&self, reference: &BBox, deltas: &[f32]) -> BBox {
        let (rw, rh) = (reference[2] - reference[0], reference[3] - reference[1]);
        let (rx, ry) = (reference[0] + 0.5 * rw, reference[1] + 0.5 * rh);
        let [wx, wy, ww, wh] = self.weights;
        let dx = deltas[0] / wx;
        let dy = deltas[1] / wy;
        let dw = (deltas[2] / ww).min(self.scale_clamp);
        let dh = (deltas[3] / wh).min(self.scale_clamp);
        let (cx, cy) = (rx + dx * rw, ry + dy * rh);
        let (w, h) = (rw * dw.exp(), rh * dh.exp());
        [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
    }
}

/// Anchors of one pyramid level in `[a, y, x]` order, matching the
/// `[n, a, h, w]` layout of the objectness map.
pub fn level_anchors(stride: usize, size: f32, aspect_ratios: &[f32], height: usize, width: usize) -> Vec<BBox> {
    let mut out = Vec::with_capacity(aspect_ratios.len() * height * width);
    for &ratio in aspect_ratios {
        let w = size / ratio.sqrt();
        let h = size * ratio.sqrt();
        for y in 0..height {
            for x in 0..width {
                let cx = (x as f32 + 0.5) * stride as f32;
                let cy = (y as f32 + 0.5) * stride as f32;
                out.push([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]);
            }
        }
    }
    out
}

/// Greedy NMS. Returns indices of kept boxes in descending score order
/// (ties broken by lower index).
pub fn nms(boxes: &[BBox], scores: &[f32], iou_threshold: f32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_basics() {
        let a = [0.0, 0.0, 10.0, 10.0];
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &[20.0, 20.0, 30.0, 30.0]), 0.0);
        assert!((iou(&a, &[5.0, 0.0, 15.0, 10.0]) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn coder_round_trip() {
        let c = BoxCoder::new([10.0, 10.0, 5.0, 5.0]);
        let r = [4.0, 6.0, 20.0, 18.0];
        let t = [5.5, 3.0, 30.0, 21.0];
        let back = c.decode(&r, &c.encode(&r, &t));
        for k in 0..4 {
            assert!((back[k] - t[k]).abs() < 1e-4);
        }
    }

    #[test]
    fn anchors_are_centred_per_cell() {
        let a = level_anchors(4, 8.0, &[1.0], 2, 2);
        assert_eq!(a[0], [-2.0, -2.0, 6.0, 6.0]);
        assert_eq!(a[3], [2.0, 2.0, 10.0, 10.0]);
    }

    #[test]
    fn nms_is_idempotent() {
        let boxes = vec![[0.0, 0.0, 10.0, 10.0], [1.0, 1.0, 11.0, 11.0], [20.0, 20.0, 30.0, 30.0], [0.0, 0.0, 9.0, 10.0]];
        let scores = vec![0.9, 0.95, 0.5, 0.3];
        let keep = nms(&boxes, &scores, 0.5);
        assert_eq!(keep, vec![1, 2]);
        let kb: Vec<BBox> = keep.iter().map(|&i| boxes[i]).collect();
        let ks: Vec<f32> = keep.iter().map(|&i| scores[i]).collect();
        assert_eq!(nms(&kb, &ks, 0.5), vec![0, 1]);
    }
}
