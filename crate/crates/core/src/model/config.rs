use serde::{Deserialize, Serialize};

use super::ModelError;

/// Residual block flavour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Two 3×3 convolutions.
    Basic,
    /// 1×1 reduce, 3×3, 1×1 expand (×4).
    Bottleneck,
}

/// Shape description of the detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub stem_channels: usize,
    /// Square kernel of the stride-2 stem convolution.
    pub stem_kernel: usize,
    /// Output channels of res2..res5.
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub block: BlockKind,
    pub pyramid_channels: usize,
    pub anchors_per_location: usize,
    /// Anchor side length as a multiple of the level stride.
    pub anchor_scale: f32,
    /// Side of the box-head crop.
    pub roi_resolution: usize,
    /// Side of the predicted mask; the mask head crops at half this size.
    pub mask_resolution: usize,
    /// Foreground classes (background is implicit).
    pub num_classes: usize,
    pub gn_groups: usize,
    pub box_head_convs: usize,
    pub box_head_fcs: usize,
    pub box_fc_dim: usize,
    pub mask_head_convs: usize,
    pub mask_head_channels: usize,
    /// Group-normalised head convolutions (no bias) instead of biased ones.
    pub head_norm: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::mini()
    }
}

impl ArchConfig {
    /// Desk-scale trainable configuration.
    pub fn mini() -> Self {
        Self {
            stem_channels: 16,
            stem_kernel: 3,
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: [1, 1, 1, 1],
            block: BlockKind::Basic,
            pyramid_channels: 32,
            anchors_per_location: 3,
            anchor_scale: 2.0,
            roi_resolution: 7,
            mask_resolution: 14,
            num_classes: 1,
            gn_groups: 8,
            box_head_convs: 0,
            box_head_fcs: 2,
            box_fc_dim: 64,
            mask_head_convs: 2,
            mask_head_channels: 16,
            head_norm: false,
        }
    }

    /// ResNet50-FPN shapes with group-normalised heads (4 conv + 1 fc box
    /// head, 4 conv mask head with a 2× up-convolution).
    pub fn full_scale() -> Self {
        Self {
            stem_channels: 64,
            stem_kernel: 7,
            stage_channels: [256, 512, 1024, 2048],
            blocks_per_stage: [3, 4, 6, 3],
            block: BlockKind::Bottleneck,
            pyramid_channels: 256,
            anchors_per_location: 3,
            anchor_scale: 8.0,
            roi_resolution: 7,
            mask_resolution: 28,
            num_classes: 1,
            gn_groups: 32,
            box_head_convs: 4,
            box_head_fcs: 1,
            box_fc_dim: 1024,
            mask_head_convs: 4,
            mask_head_channels: 256,
            head_norm: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive: [(&str, usize); 12] = [
            ("stem_channels", self.stem_channels),
            ("stem_kernel", self.stem_kernel),
            ("pyramid_channels", self.pyramid_channels),
            ("anchors_per_location", self.anchors_per_location),
            ("roi_resolution", self.roi_resolution),
            ("mask_resolution", self.mask_resolution),
            ("num_classes", self.num_classes),
            ("gn_groups", self.gn_groups),
            ("box_head_fcs", self.box_head_fcs),
            ("box_fc_dim", self.box_fc_dim),
            ("mask_head_channels", self.mask_head_channels),
            ("mask_head_convs", self.mask_head_convs),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(ModelError::Config { field, reason: "must be >= 1".into() });
            }
        }
        if self.stage_channels.contains(&0) {
            return Err(ModelError::Config { field: "stage_channels", reason: "all entries must be >= 1".into() });
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(ModelError::Config { field: "blocks_per_stage", reason: "all entries must be >= 1".into() });
        }
        if self.stem_kernel.is_multiple_of(2) {
            return Err(ModelError::Config { field: "stem_kernel", reason: "must be odd".into() });
        }
        if self.anchors_per_location != 3 && self.anchors_per_location != 1 {
            return Err(ModelError::Config { field: "anchors_per_location", reason: "supported values are 1 or 3".into() });
        }
        if !(self.anchor_scale > 0.0) {
            return Err(ModelError::Config { field: "anchor_scale", reason: "must be positive".into() });
        }
        if !self.mask_resolution.is_multiple_of(2) {
            return Err(ModelError::Config { field: "mask_resolution", reason: "must be even".into() });
        }
        let mut norm_channels = vec![("stem_channels", self.stem_channels), ("pyramid_channels", self.pyramid_channels)];
        norm_channels.extend(self.stage_channels.iter().map(|&c| ("stage_channels", c)));
        if self.block == BlockKind::Bottleneck {
            norm_channels.extend(self.stage_channels.iter().map(|&c| ("stage_channels", c / 4)));
        }
        if self.head_norm {
            norm_channels.push(("mask_head_channels", self.mask_head_channels));
        }
        for (field, c) in norm_channels {
            if c % self.gn_groups != 0 {
                return Err(ModelError::Config { field, reason: format!("{c} channels not divisible by gn_groups = {}", self.gn_groups) });
            }
        }
        Ok(())
    }

    /// Aspect ratios (h / w) of the anchors at each location.
    pub fn aspect_ratios(&self) -> Vec<f32> {
        if self.anchors_per_location == 1 {
            vec![1.0]
        } else {
            vec![0.5, 1.0, 2.0]
        }
    }

    pub fn anchor_size(&self, level: usize) -> f32 {
        self.anchor_scale * (1usize << level) as f32
    }
}

/// `(level, height, width)` of P2..P5 for an input image.
pub fn pyramid_shapes(_config: &ArchConfig, image_h: usize, image_w: usize) -> Result<Vec<(usize, usize, usize)>, ModelError> {
    if image_h == 0 || image_w == 0 || !image_h.is_multiple_of(32) || !image_w.is_multiple_of(32) {
        return Err(ModelError::ImageSize { height: image_h, width: image_w });
    }
    Ok((2..=5).map(|l| (l, image_h >> l, image_w >> l)).collect())
}
