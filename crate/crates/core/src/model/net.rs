//! Forward passes for training (losses) and inference (detections).

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{accumulate_param_grads, softmax_in_place, Graph, OpKind, Parameter, RoiBox, Tensor, Var};
use crate::geometry::Mask;
use crate::sample::{Image, Sample};

use super::boxes::{clip, level_anchors, nms, BBox};
use super::config::{pyramid_shapes, ArchConfig, BlockKind};
use super::layout::stage_blocks;
use super::targets::{label_anchors, mask_target, propose, roi_level, sample_rois, subsample, DetectorConfig, ROI_CODER, RPN_CODER};
use super::{ModelError, ModelGraph};

const GN_EPS: f32 = 1e-5;
const RPN_BETA: f32 = 1.0 / 9.0;
const ROI_BETA: f32 = 1.0;

/// One predicted instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    /// `[x1, y1, x2, y2]` in image pixels.
    pub bbox: BBox,
    pub score: f32,
    /// `1..=num_classes`.
    pub class_id: usize,
    /// Mask probabilities on a `mask_resolution`² grid spanning `bbox`.
    pub mask_probs: Vec<f32>,
    pub mask_resolution: usize,
}

impl Detection {
    /// The mask grid thresholded at 0.5.
    pub fn mask_grid(&self) -> Vec<bool> {
        self.mask_probs.iter().map(|&p| p >= 0.5).collect()
    }

    /// Pastes the mask into an image-sized grid by bilinear resampling of the
    /// probabilities, then thresholds at 0.5.
    pub fn paste(&self, height: usize, width: usize) -> Mask {
        let m = self.mask_resolution;
        let mut out = Mask::new(height, width);
        let [x1, y1, x2, y2] = self.bbox;
        let (bw, bh) = ((x2 - x1) / m as f32, (y2 - y1) / m as f32);
        if m == 0 || bw <= 0.0 || bh <= 0.0 {
            return out;
        }
        let r0 = (y1.floor().max(0.0)) as usize;
        let r1 = (y2.ceil().max(0.0) as usize).min(height);
        let c0 = (x1.floor().max(0.0)) as usize;
        let c1 = (x2.ceil().max(0.0) as usize).min(width);
        let at = |i: isize, j: isize| -> f32 {
            let i = i.clamp(0, m as isize - 1) as usize;
            let j = j.clamp(0, m as isize - 1) as usize;
            self.mask_probs[i * m + j]
        };
        for r in r0..r1 {
            let py = r as f32 + 0.5;
            if py < y1 || py > y2 {
                continue;
            }
            let v = (py - y1) / bh - 0.5;
            for c in c0..c1 {
                let px = c as f32 + 0.5;
                if px < x1 || px > x2 {
                    continue;
                }
                let u = (px - x1) / bw - 0.5;
                let (iv, iu) = (v.floor(), u.floor());
                let (fv, fu) = (v - iv, u - iu);
                let (iv, iu) = (iv as isize, iu as isize);
                let p = (1.0 - fv) * ((1.0 - fu) * at(iv, iu) + fu * at(iv, iu + 1)) + fv * ((1.0 - fu) * at(iv + 1, iu) + fu * at(iv + 1, iu + 1));
                if p >= 0.5 {
                    out.set(r, c, true);
                }
            }
        }
        out
    }
}

/// Recorded training graph plus the individual loss terms.
pub struct LossBundle {
    pub graph: Graph,
    pub total: Var,
    pub rpn_objectness: f32,
    pub rpn_box: f32,
    pub roi_class: f32,
    pub roi_box: f32,
    pub roi_mask: f32,
}

impl LossBundle {
    pub fn total_value(&self) -> f32 {
        self.graph.value(self.total).item()
    }

    /// Back-propagates and adds gradients to the trainable parameters.
    pub fn backward_into(&mut self, params: &mut [Parameter]) -> Result<(), ModelError> {
        self.graph.backward(self.total)?;
        accumulate_param_grads(&self.graph, params);
        Ok(())
    }
}

struct Net<'m> {
    model: &'m ModelGraph,
    g: Graph,
    train: bool,
    cache: HashMap<&'m str, Var>,
}

struct Features {
    /// P2..P5.
    pyramid: Vec<Var>,
    objectness: Vec<Var>,
    deltas: Vec<Var>,
}

impl<'m> Net<'m> {
    fn new(model: &'m ModelGraph, train: bool) -> Self {
        Self { model, g: Graph::new(), train, cache: HashMap::new() }
    }

    fn cfg(&self) -> &'m ArchConfig {
        self.model.config()
    }

    fn p(&mut self, path: &str) -> Var {
        let i = self.model.param_index(path).unwrap_or_else(|| panic!("layout has no parameter `{path}`"));
        let param = &self.model.params()[i];
        if let Some(&v) = self.cache.get(param.path.as_str()) {
            return v;
        }
        let v = self.g.param(i, &param.tensor, self.train && param.trainable);
        self.cache.insert(param.path.as_str(), v);
        v
    }

    fn has(&self, path: &str) -> bool {
        self.model.param_index(path).is_some()
    }

    /// Convolution followed by group norm (if the layer has one) or bias.
    fn conv(&mut self, x: Var, path: &str, stride: usize, padding: usize) -> Result<Var, ModelError> {
        let w = self.p(&format!("{path}.weight"));
        if self.has(&format!("{path}.norm.weight")) {
            let y = self.g.conv2d(x, w, None, stride, padding)?;
            let gamma = self.p(&format!("{path}.norm.weight"));
            let beta = self.p(&format!("{path}.norm.bias"));
            Ok(self.g.group_norm(y, gamma, beta, self.cfg().gn_groups, GN_EPS)?)
        } else {
            let b = self.p(&format!("{path}.bias"));
            Ok(self.g.conv2d(x, w, Some(b), stride, padding)?)
        }
    }

    fn linear(&mut self, x: Var, path: &str) -> Result<Var, ModelError> {
        let w = self.p(&format!("{path}.weight"));
        let b = self.p(&format!("{path}.bias"));
        Ok(self.g.linear(x, w, Some(b))?)
    }

    fn backbone(&mut self, x: Var) -> Result<Vec<Var>, ModelError> {
        let cfg = self.cfg();
        let k = cfg.stem_kernel;
        let mut h = self.conv(x, "backbone.stem.conv", 2, k / 2)?;
        h = self.g.relu(h)?;
        h = self.g.max_pool(h, 3, 2, 1)?;
        let mut outs = Vec::with_capacity(4);
        for stage in 0..4 {
            for blk in stage_blocks(cfg, stage) {
                let p = &blk.prefix;
                let mut y = match cfg.block {
                    BlockKind::Basic => {
                        let y = self.conv(h, &format!("{p}.conv1"), blk.stride, 1)?;
                        let y = self.g.relu(y)?;
                        self.conv(y, &format!("{p}.conv2"), 1, 1)?
                    }
                    BlockKind::Bottleneck => {
                        let y = self.conv(h, &format!("{p}.conv1"), 1, 0)?;
                        let y = self.g.relu(y)?;
                        let y = self.conv(y, &format!("{p}.conv2"), blk.stride, 1)?;
                        let y = self.g.relu(y)?;
                        self.conv(y, &format!("{p}.conv3"), 1, 0)?
                    }
                };
                let skip = if blk.shortcut { self.conv(h, &format!("{p}.shortcut"), blk.stride, 0)? } else { h };
                y = self.g.add(y, skip)?;
                h = self.g.relu(y)?;
            }
            outs.push(h);
        }
        Ok(outs)
    }

    fn fpn(&mut self, c: &[Var]) -> Result<Vec<Var>, ModelError> {
        let mut merged: Vec<Option<Var>> = vec![None; 4];
        let mut top: Option<Var> = None;
        for i in (0..4).rev() {
            let lat = self.conv(c[i], &format!("fpn.lateral{}", i + 2), 1, 0)?;
            let m = match top {
                Some(t) => {
                    let up = self.g.upsample(t, 2)?;
                    self.g.add(lat, up)?
                }
                None => lat,
            };
            merged[i] = Some(m);
            top = Some(m);
        }
        merged.into_iter().enumerate().map(|(i, m)| self.conv(m.expect("filled above"), &format!("fpn.output{}", i + 2), 1, 1)).collect()
    }

    fn features(&mut self, input: Tensor) -> Result<Features, ModelError> {
        let x = self.g.constant(input);
        let c = self.backbone(x)?;
        let pyramid = self.fpn(&c)?;
        let mut objectness = Vec::new();
        let mut deltas = Vec::new();
        for &p in &pyramid {
            let t = self.conv(p, "rpn.conv", 1, 1)?;
            let t = self.g.relu(t)?;
            objectness.push(self.conv(t, "rpn.objectness", 1, 0)?);
            deltas.push(self.conv(t, "rpn.deltas", 1, 0)?);
        }
        Ok(Features { pyramid, objectness, deltas })
    }

    /// Per-image `(anchors, logits, deltas)` for each level, read off the tape.
    fn rpn_outputs(&self, f: &Features, image: usize, height: usize, width: usize) -> Vec<(Vec<BBox>, Vec<f32>, Vec<[f32; 4]>)> {
        let cfg = self.cfg();
        let ratios = cfg.aspect_ratios();
        let a = ratios.len();
        (0..4)
            .map(|li| {
                let level = li + 2;
                let (h, w) = (height >> level, width >> level);
                let anchors = level_anchors(1 << level, cfg.anchor_size(level), &ratios, h, w);
                let hw = h * w;
                let obj = &self.g.value(f.objectness[li]).data()[image * a * hw..(image + 1) * a * hw];
                let del = &self.g.value(f.deltas[li]).data()[image * 4 * a * hw..(image + 1) * 4 * a * hw];
                let deltas = (0..a * hw)
                    .map(|idx| {
                        let (ai, pos) = (idx / hw, idx % hw);
                        std::array::from_fn(|k| del[(ai * 4 + k) * hw + pos])
                    })
                    .collect();
                (anchors, obj.to_vec(), deltas)
            })
            .collect()
    }

    fn roi_boxes(&self, rois: &[(usize, BBox)]) -> Vec<RoiBox> {
        let scale = self.cfg().anchor_scale;
        rois.iter().map(|&(batch, b)| RoiBox { batch, level: roi_level(&b, scale) - 2, x1: b[0], y1: b[1], x2: b[2], y2: b[3] }).collect()
    }

    fn crop(&mut self, f: &Features, rois: &[(usize, BBox)], size: usize) -> Result<Var, ModelError> {
        let kind = OpKind::RoiCropResize {
            rois: self.roi_boxes(rois),
            output_size: size,
            spatial_scales: (2..=5).map(|l| 1.0 / (1u32 << l) as f32).collect(),
        };
        Ok(self.g.forward_op(kind, &f.pyramid)?)
    }

    /// Class logits `[r, k+1]` and box deltas `[r, 4k]`.
    fn box_head(&mut self, f: &Features, rois: &[(usize, BBox)]) -> Result<(Var, Var), ModelError> {
        let cfg = self.cfg();
        let mut x = self.crop(f, rois, cfg.roi_resolution)?;
        for i in 0..cfg.box_head_convs {
            x = self.conv(x, &format!("roi_heads.box_head.conv{i}"), 1, 1)?;
            x = self.g.relu(x)?;
        }
        let feat = self.g.shape(x)[1..].iter().product::<usize>();
        x = self.g.reshape(x, [rois.len(), feat])?;
        for i in 0..cfg.box_head_fcs {
            x = self.linear(x, &format!("roi_heads.box_head.fc{i}"))?;
            x = self.g.relu(x)?;
        }
        let cls = self.linear(x, "roi_heads.box_predictor.cls")?;
        let bbox = self.linear(x, "roi_heads.box_predictor.bbox")?;
        Ok((cls, bbox))
    }

    /// Mask logits `[r, k, m, m]`.
    fn mask_head(&mut self, f: &Features, rois: &[(usize, BBox)]) -> Result<Var, ModelError> {
        let cfg = self.cfg();
        let mut x = self.crop(f, rois, cfg.mask_resolution / 2)?;
        for i in 0..cfg.mask_head_convs {
            x = self.conv(x, &format!("roi_heads.mask_head.conv{i}"), 1, 1)?;
            x = self.g.relu(x)?;
        }
        let w = self.p("roi_heads.mask_head.upconv.weight");
        let b = self.p("roi_heads.mask_head.upconv.bias");
        x = self.g.upconv2x2(x, w, Some(b))?;
        x = self.g.relu(x)?;
        self.conv(x, "roi_heads.mask_head.predictor", 1, 0)
    }
}

fn batch_tensor(images: &[&Image]) -> Result<(Tensor, usize, usize), ModelError> {
    let first = images.first().ok_or(ModelError::EmptyBatch)?;
    let (h, w) = (first.height, first.width);
    if images.iter().any(|im| im.height != h || im.width != w) {
        return Err(ModelError::MixedBatch);
    }
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    images.iter().for_each(|im| data.extend_from_slice(&im.data));
    Ok((Tensor::new([images.len(), 3, h, w], data), h, w))
}

fn class_of(category_id: u32, num_classes: usize) -> Result<usize, ModelError> {
    let c = category_id as usize;
    if c == 0 || c > num_classes {
        return Err(ModelError::Category { category_id, num_classes });
    }
    Ok(c)
}

/// Records the full training forward pass for a batch of equally sized
/// images and returns the summed loss.
pub fn forward_train<R: Rng + ?Sized>(model: &ModelGraph, batch: &[&Sample], det: &DetectorConfig, rng: &mut R) -> Result<LossBundle, ModelError> {
    let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
    let (input, height, width) = batch_tensor(&images)?;
    let cfg = model.config();
    pyramid_shapes(cfg, height, width)?;
    let n = batch.len();
    let k = cfg.num_classes;
    let mut net = Net::new(model, true);
    let f = net.features(input)?;

    // RPN targets.
    let a = cfg.aspect_ratios().len();
    let rpn_norm = 1.0 / (n * det.rpn_batch_per_image) as f32;
    let mut obj_t: Vec<Vec<f32>> = Vec::new();
    let mut obj_w: Vec<Vec<f32>> = Vec::new();
    let mut box_t: Vec<Vec<f32>> = Vec::new();
    let mut box_w: Vec<Vec<f32>> = Vec::new();
    for li in 0..4 {
        let numel = net.g.value(f.objectness[li]).numel();
        obj_t.push(vec![0.0; numel]);
        obj_w.push(vec![0.0; numel]);
        box_t.push(vec![0.0; 4 * numel]);
        box_w.push(vec![0.0; 4 * numel]);
    }
    let mut proposals: Vec<Vec<BBox>> = Vec::with_capacity(n);
    for (bi, s) in batch.iter().enumerate() {
        let gts: Vec<BBox> = s.instances.iter().map(|i| clip(&i.xyxy(), height, width)).collect();
        let levels = net.rpn_outputs(&f, bi, height, width);
        let all_anchors: Vec<BBox> = levels.iter().flat_map(|l| l.0.iter().copied()).collect();
        let (mut labels, matched) = label_anchors(&all_anchors, &gts, det);
        subsample(&mut labels, det.rpn_batch_per_image, det.rpn_positive_fraction, rng);
        let mut offset = 0;
        for (li, (anchors, _, _)) in levels.iter().enumerate() {
            let hw = anchors.len() / a;
            for (j, anchor) in anchors.iter().enumerate() {
                let label = labels[offset + j];
                if label < 0 {
                    continue;
                }
                let (ai, pos) = (j / hw, j % hw);
                let oi = (bi * a + ai) * hw + pos;
                obj_t[li][oi] = f32::from(label);
                obj_w[li][oi] = rpn_norm;
                if label == 1 {
                    let enc = RPN_CODER.encode(anchor, &gts[matched[offset + j]]);
                    for (c, e) in enc.iter().enumerate() {
                        let di = ((bi * a + ai) * 4 + c) * hw + pos;
                        box_t[li][di] = *e;
                        box_w[li][di] = rpn_norm;
                    }
                }
            }
            offset += anchors.len();
        }
        proposals.push(propose(&levels, height, width, det));
    }
    let mut obj_terms = Vec::new();
    let mut box_terms = Vec::new();
    for li in 0..4 {
        let kind = OpKind::BinaryCrossEntropy { targets: std::mem::take(&mut obj_t[li]), weights: std::mem::take(&mut obj_w[li]) };
        obj_terms.push(net.g.forward_op(kind, &[f.objectness[li]])?);
        let kind = OpKind::SmoothL1 { targets: std::mem::take(&mut box_t[li]), weights: std::mem::take(&mut box_w[li]), beta: RPN_BETA };
        box_terms.push(net.g.forward_op(kind, &[f.deltas[li]])?);
    }
    let rpn_obj = net.g.add_all(&obj_terms)?;
    let rpn_box = net.g.add_all(&box_terms)?;

    // ROI sampling.
    let mut rois: Vec<(usize, BBox)> = Vec::new();
    let mut samples = Vec::new();
    for (bi, s) in batch.iter().enumerate() {
        let gts: Vec<BBox> = s.instances.iter().map(|i| clip(&i.xyxy(), height, width)).collect();
        let classes = s.instances.iter().map(|i| class_of(i.category_id, k)).collect::<Result<Vec<_>, _>>()?;
        for r in sample_rois(&proposals[bi], &gts, &classes, det, rng) {
            if r.bbox[2] > r.bbox[0] && r.bbox[3] > r.bbox[1] {
                rois.push((bi, r.bbox));
                samples.push((bi, r));
            }
        }
    }
    let (roi_cls, roi_box, roi_mask) = if rois.is_empty() {
        let z = || Tensor::scalar(0.0);
        (net.g.constant(z()), net.g.constant(z()), net.g.constant(z()))
    } else {
        let r = rois.len();
        let (cls, bbox) = net.box_head(&f, &rois)?;
        let norm = 1.0 / r as f32;
        let targets: Vec<usize> = samples.iter().map(|(_, s)| s.class).collect();
        let cls_loss = net.g.forward_op(OpKind::CrossEntropy { targets, weights: vec![norm; r] }, &[cls])?;
        let mut bt = vec![0.0f32; r * 4 * k];
        let mut bw = vec![0.0f32; r * 4 * k];
        for (i, (bi, s)) in samples.iter().enumerate() {
            if let Some(gi) = s.gt {
                let gt = clip(&batch[*bi].instances[gi].xyxy(), height, width);
                let enc = ROI_CODER.encode(&s.bbox, &gt);
                for c in 0..4 {
                    bt[i * 4 * k + 4 * (s.class - 1) + c] = enc[c];
                    bw[i * 4 * k + 4 * (s.class - 1) + c] = norm;
                }
            }
        }
        let box_loss = net.g.forward_op(OpKind::SmoothL1 { targets: bt, weights: bw, beta: ROI_BETA }, &[bbox])?;

        let fg: Vec<usize> = (0..r).filter(|&i| samples[i].1.gt.is_some()).collect();
        let mask_loss = if fg.is_empty() {
            net.g.constant(Tensor::scalar(0.0))
        } else {
            let fg_rois: Vec<(usize, BBox)> = fg.iter().map(|&i| rois[i]).collect();
            let logits = net.mask_head(&f, &fg_rois)?;
            let m = cfg.mask_resolution;
            let mut mt = vec![0.0f32; fg.len() * k * m * m];
            let mut mw = vec![0.0f32; fg.len() * k * m * m];
            let w = 1.0 / (fg.len() * m * m) as f32;
            for (j, &i) in fg.iter().enumerate() {
                let (bi, s) = &samples[i];
                let inst = &batch[*bi].instances[s.gt.expect("foreground")];
                let base = (j * k + s.class - 1) * m * m;
                mt[base..base + m * m].copy_from_slice(&mask_target(&inst.polygons, &s.bbox, m));
                mw[base..base + m * m].iter_mut().for_each(|v| *v = w);
            }
            net.g.forward_op(OpKind::BinaryCrossEntropy { targets: mt, weights: mw }, &[logits])?
        };
        (cls_loss, box_loss, mask_loss)
    };
    let total = net.g.add_all(&[rpn_obj, rpn_box, roi_cls, roi_box, roi_mask])?;
    let val = |g: &Graph, v: Var| g.value(v).item();
    Ok(LossBundle {
        rpn_objectness: val(&net.g, rpn_obj),
        rpn_box: val(&net.g, rpn_box),
        roi_class: val(&net.g, roi_cls),
        roi_box: val(&net.g, roi_box),
        roi_mask: val(&net.g, roi_mask),
        total,
        graph: net.g,
    })
}

/// Runs the detector on one image. Detections scoring at or below
/// `score_floor` are dropped before per-class NMS.
pub fn forward_infer(model: &ModelGraph, image: &Image, score_floor: f32, det: &DetectorConfig) -> Result<Vec<Detection>, ModelError> {
    let (input, height, width) = batch_tensor(&[image])?;
    let cfg = model.config();
    pyramid_shapes(cfg, height, width)?;
    let k = cfg.num_classes;
    let mut net = Net::new(model, false);
    let f = net.features(input)?;
    let levels = net.rpn_outputs(&f, 0, height, width);
    let proposals = propose(&levels, height, width, det);
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let rois: Vec<(usize, BBox)> = proposals.iter().map(|&b| (0, b)).collect();
    let (cls, bbox) = net.box_head(&f, &rois)?;
    let mut probs = net.g.value(cls).data().to_vec();
    probs.chunks_mut(k + 1).for_each(softmax_in_place);
    let deltas = net.g.value(bbox).data();

    let mut found: Vec<(BBox, f32, usize)> = Vec::new();
    for c in 1..=k {
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for (i, p) in proposals.iter().enumerate() {
            let s = probs[i * (k + 1) + c];
            if !(s > score_floor) {
                continue;
            }
            let d = &deltas[i * 4 * k + 4 * (c - 1)..i * 4 * k + 4 * c];
            let b = clip(&ROI_CODER.decode(p, d), height, width);
            if b[2] > b[0] && b[3] > b[1] {
                boxes.push(b);
                scores.push(s);
            }
        }
        for i in nms(&boxes, &scores, det.nms_iou) {
            found.push((boxes[i], scores[i], c));
        }
    }
    found.sort_by(|a, b| b.1.total_cmp(&a.1));
    found.truncate(det.detections_per_image);
    if found.is_empty() {
        return Ok(Vec::new());
    }
    let rois: Vec<(usize, BBox)> = found.iter().map(|d| (0, d.0)).collect();
    let logits = net.mask_head(&f, &rois)?;
    let m = cfg.mask_resolution;
    let data = net.g.value(logits).data();
    Ok(found
        .into_iter()
        .enumerate()
        .map(|(j, (bbox, score, class_id))| {
            let base = (j * k + class_id - 1) * m * m;
            Detection {
                bbox,
                score: score.clamp(0.0, 1.0),
                class_id,
                mask_probs: data[base..base + m * m].iter().map(|&v| crate::autodiff::sigmoid(v)).collect(),
                mask_resolution: m,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sgd_step;
    use crate::geometry::Polygon;
    use crate::model::build_model;
    use crate::sample::Instance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square_sample(id: u64, x: f64, y: f64, s: f64) -> Sample {
        let mut image = Image::new(64, 64);
        let poly = Polygon::new(vec![[x, y], [x + s, y], [x + s, y + s], [x, y + s]]);
        for r in 0..64 {
            for c in 0..64 {
                let on = poly.contains(c as f64 + 0.5, r as f64 + 0.5);
                image.set_pixel(r, c, if on { [0.8, 0.2, 0.6] } else { [0.2, 0.5, 0.3] });
            }
        }
        Sample { id, file_name: format!("{id}.png"), image, instances: vec![Instance::from_polygons(1, vec![poly])], stratum: String::new() }
    }

    #[test]
    fn empty_image_has_zero_mask_loss() {
        let model = build_model(&ArchConfig::mini(), 0).unwrap();
        let mut s = square_sample(0, 10.0, 10.0, 16.0);
        s.instances.clear();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = forward_train(&model, &[&s], &DetectorConfig::default(), &mut rng).unwrap();
        assert_eq!(b.roi_mask, 0.0);
        assert!(b.total_value().is_finite());
        assert_eq!(b.rpn_box, 0.0);
    }

    #[test]
    fn loss_terms_are_non_negative_and_sum() {
        let model = build_model(&ArchConfig::mini(), 1).unwrap();
        let s = square_sample(0, 20.0, 12.0, 20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = forward_train(&model, &[&s], &DetectorConfig::default(), &mut rng).unwrap();
        let terms = [b.rpn_objectness, b.rpn_box, b.roi_class, b.roi_box, b.roi_mask];
        assert!(terms.iter().all(|&t| t >= 0.0), "{terms:?}");
        assert!((terms.iter().sum::<f32>() - b.total_value()).abs() < 1e-4);
        assert!(b.roi_mask > 0.0);
    }

    #[test]
    fn rejects_unknown_category() {
        let model = build_model(&ArchConfig::mini(), 1).unwrap();
        let mut s = square_sample(0, 20.0, 12.0, 20.0);
        s.instances[0].category_id = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(forward_train(&model, &[&s], &DetectorConfig::default(), &mut rng), Err(ModelError::Category { .. })));
    }

    #[test]
    fn untrained_inference_at_high_floor_is_subset() {
        let model = build_model(&ArchConfig::mini(), 2).unwrap();
        let s = square_sample(0, 20.0, 12.0, 20.0);
        let det = DetectorConfig::default();
        let lo = forward_infer(&model, &s.image, 0.0, &det).unwrap();
        let hi = forward_infer(&model, &s.image, 0.9, &det).unwrap();
        assert!(hi.len() <= lo.len());
        for d in &hi {
            assert!(lo.iter().any(|e| e.bbox == d.bbox && e.score == d.score));
        }
        for d in &lo {
            assert!(d.bbox[0] < d.bbox[2] && d.bbox[1] < d.bbox[3]);
            assert!((0.0..=1.0).contains(&d.score));
        }
    }

    #[test]
    fn paste_of_full_mask_fills_box() {
        let d = Detection { bbox: [2.0, 3.0, 10.0, 7.0], score: 1.0, class_id: 1, mask_probs: vec![1.0; 16], mask_resolution: 4 };
        let m = d.paste(12, 12);
        assert_eq!(m.count(), 8 * 4);
        assert_eq!(d.mask_grid().len(), 16);
    }

    #[test]
    fn overfits_tiny_batch() {
        let mut model = build_model(&ArchConfig::mini(), 5).unwrap();
        let samples = [
            square_sample(0, 8.0, 8.0, 20.0),
            square_sample(1, 30.0, 24.0, 24.0),
            square_sample(2, 12.0, 36.0, 16.0),
            square_sample(3, 36.0, 6.0, 18.0),
        ];
        let refs: Vec<&Sample> = samples.iter().collect();
        let det = DetectorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..50 {
            let mut b = forward_train(&model, &refs, &det, &mut rng).unwrap();
            last = b.total_value();
            first.get_or_insert(last);
            b.backward_into(model.params_mut()).unwrap();
            sgd_step(model.params_mut(), 0.02);
        }
        assert!(last < 0.5 * first.unwrap(), "first {first:?} last {last}");
    }
}
