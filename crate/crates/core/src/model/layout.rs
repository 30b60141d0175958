//! Parameter inventory derived from an [`ArchConfig`] without allocating weights.

use crate::groups::GroupLabel;

use super::config::{ArchConfig, BlockKind};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal with the given fan-in.
    Kaiming {
        fan_in: usize,
    },
    Normal {
        std: f32,
    },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub group: GroupLabel,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// One residual block of a stage.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockShape {
    pub prefix: String,
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub shortcut: bool,
}

pub(crate) fn stage_blocks(config: &ArchConfig, stage: usize) -> Vec<BlockShape> {
    let n = stage + 2;
    let out = config.stage_channels[stage];
    let mid = match config.block {
        BlockKind::Basic => out,
        BlockKind::Bottleneck => out / 4,
    };
    let mut in_c = if stage == 0 { config.stem_channels } else { config.stage_channels[stage - 1] };
    (0..config.blocks_per_stage[stage])
        .map(|b| {
            let stride = if b == 0 && stage > 0 { 2 } else { 1 };
            let shape = BlockShape {
                prefix: format!("backbone.res{n}.block{b}"),
                in_channels: in_c,
                mid_channels: mid,
                out_channels: out,
                stride,
                shortcut: in_c != out || stride != 1,
            };
            in_c = out;
            shape
        })
        .collect()
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn push(&mut self, path: String, shape: Vec<usize>, group: GroupLabel, init: Init) {
        self.specs.push(ParamSpec { path, shape, group, init });
    }

    /// Convolution with either a GN affine pair (`norm`) or a bias.
    fn conv(&mut self, path: &str, group: GroupLabel, in_c: usize, out_c: usize, k: usize, norm: bool, init: Init) {
        self.push(format!("{path}.weight"), vec![out_c, in_c, k, k], group, init);
        if norm {
            self.push(format!("{path}.norm.weight"), vec![out_c], group, Init::Ones);
            self.push(format!("{path}.norm.bias"), vec![out_c], group, Init::Zeros);
        } else {
            self.push(format!("{path}.bias"), vec![out_c], group, Init::Zeros);
        }
    }

    fn linear(&mut self, path: &str, group: GroupLabel, in_f: usize, out_f: usize, init: Init) {
        self.push(format!("{path}.weight"), vec![out_f, in_f], group, init);
        self.push(format!("{path}.bias"), vec![out_f], group, Init::Zeros);
    }
}

fn kaiming(in_c: usize, k: usize) -> Init {
    Init::Kaiming { fan_in: in_c * k * k }
}

/// Every parameter of the detector, in forward order.
pub fn param_layout(config: &ArchConfig) -> Vec<ParamSpec> {
    let mut b = Builder { specs: Vec::new() };
    let sc = config.stem_channels;
    b.conv("backbone.stem.conv", GroupLabel::Stem, 3, sc, config.stem_kernel, true, kaiming(3, config.stem_kernel));

    for stage in 0..4 {
        let group = GroupLabel::Res(stage as u8 + 2);
        for blk in stage_blocks(config, stage) {
            let p = &blk.prefix;
            match config.block {
                BlockKind::Basic => {
                    b.conv(&format!("{p}.conv1"), group, blk.in_channels, blk.mid_channels, 3, true, kaiming(blk.in_channels, 3));
                    b.conv(&format!("{p}.conv2"), group, blk.mid_channels, blk.out_channels, 3, true, kaiming(blk.mid_channels, 3));
                }
                BlockKind::Bottleneck => {
                    b.conv(&format!("{p}.conv1"), group, blk.in_channels, blk.mid_channels, 1, true, kaiming(blk.in_channels, 1));
                    b.conv(&format!("{p}.conv2"), group, blk.mid_channels, blk.mid_channels, 3, true, kaiming(blk.mid_channels, 3));
                    b.conv(&format!("{p}.conv3"), group, blk.mid_channels, blk.out_channels, 1, true, kaiming(blk.mid_channels, 1));
                }
            }
            if blk.shortcut {
                b.conv(&format!("{p}.shortcut"), group, blk.in_channels, blk.out_channels, 1, true, kaiming(blk.in_channels, 1));
            }
        }
    }

    let pc = config.pyramid_channels;
    for stage in 0..4 {
        let n = stage + 2;
        let group = GroupLabel::Fpn(n as u8);
        let c = config.stage_channels[stage];
        b.conv(&format!("fpn.lateral{n}"), group, c, pc, 1, true, kaiming(c, 1));
        b.conv(&format!("fpn.output{n}"), group, pc, pc, 3, true, kaiming(pc, 3));
    }

    let a = config.anchors_per_location;
    b.conv("rpn.conv", GroupLabel::Rpn, pc, pc, 3, false, Init::Normal { std: 0.01 });
    b.conv("rpn.objectness", GroupLabel::Rpn, pc, a, 1, false, Init::Normal { std: 0.01 });
    b.conv("rpn.deltas", GroupLabel::Rpn, pc, 4 * a, 1, false, Init::Normal { std: 0.01 });

    let roi = GroupLabel::RoiHeads;
    let norm = config.head_norm;
    let r = config.roi_resolution;
    let mut ch = pc;
    for i in 0..config.box_head_convs {
        b.conv(&format!("roi_heads.box_head.conv{i}"), roi, ch, pc, 3, norm, kaiming(ch, 3));
        ch = pc;
    }
    let mut feat = ch * r * r;
    for i in 0..config.box_head_fcs {
        b.linear(&format!("roi_heads.box_head.fc{i}"), roi, feat, config.box_fc_dim, Init::Kaiming { fan_in: feat });
        feat = config.box_fc_dim;
    }
    let k = config.num_classes;
    b.linear("roi_heads.box_predictor.cls", roi, feat, k + 1, Init::Normal { std: 0.01 });
    b.linear("roi_heads.box_predictor.bbox", roi, feat, 4 * k, Init::Normal { std: 0.001 });

    let mc = config.mask_head_channels;
    let mut ch = pc;
    for i in 0..config.mask_head_convs {
        b.conv(&format!("roi_heads.mask_head.conv{i}"), roi, ch, mc, 3, norm, kaiming(ch, 3));
        ch = mc;
    }
    b.push("roi_heads.mask_head.upconv.weight".into(), vec![ch, mc, 2, 2], roi, Init::Kaiming { fan_in: ch });
    b.push("roi_heads.mask_head.upconv.bias".into(), vec![mc], roi, Init::Zeros);
    b.conv("roi_heads.mask_head.predictor", roi, mc, k, 1, false, Init::Normal { std: 0.001 });
    b.specs
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn paths_are_unique_and_groups_cover_all() {
        for config in [ArchConfig::mini(), ArchConfig::full_scale()] {
            let specs = param_layout(&config);
            let paths: HashSet<_> = specs.iter().map(|s| s.path.as_str()).collect();
            assert_eq!(paths.len(), specs.len());
            let groups: HashSet<_> = specs.iter().map(|s| s.group).collect();
            assert_eq!(groups.len(), 11);
        }
    }

    #[test]
    fn stem_matches_resnet50() {
        let specs = param_layout(&ArchConfig::full_scale());
        let stem: usize = specs.iter().filter(|s| s.group == GroupLabel::Stem).map(ParamSpec::numel).sum();
        assert_eq!(stem, 64 * 3 * 49 + 128);
    }
}
