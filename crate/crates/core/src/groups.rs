use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Named architectural component that owns a parameter.
///
/// Every parameter of a model belongs to exactly one group; surgical
/// fine-tuning selects groups, never individual tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupLabel {
    Stem,
    /// Residual stage 2..=5.
    Res(u8),
    /// Pyramid lateral + output convolution at level 2..=5.
    Fpn(u8),
    Rpn,
    RoiHeads,
}

impl GroupLabel {
    pub const STAGES: [u8; 4] = [2, 3, 4, 5];

    /// All eleven groups in network order.
    pub fn all() -> Vec<GroupLabel> {
        let mut v = vec![GroupLabel::Stem];
        v.extend(Self::STAGES.iter().map(|&n| GroupLabel::Res(n)));
        v.extend(Self::STAGES.iter().map(|&n| GroupLabel::Fpn(n)));
        v.push(GroupLabel::Rpn);
        v.push(GroupLabel::RoiHeads);
        v
    }
}

impl fmt::Display for GroupLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupLabel::Stem => write!(f, "stem"),
            GroupLabel::Res(n) => write!(f, "res{n}"),
            GroupLabel::Fpn(n) => write!(f, "fpn@{n}"),
            GroupLabel::Rpn => write!(f, "rpn"),
            GroupLabel::RoiHeads => write!(f, "roi_heads"),
        }
    }
}

impl FromStr for GroupLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let stage = |d: &str| d.parse::<u8>().ok().filter(|n| (2..=5).contains(n));
        match s {
            "stem" => Ok(GroupLabel::Stem),
            "rpn" => Ok(GroupLabel::Rpn),
            "roi_heads" => Ok(GroupLabel::RoiHeads),
            _ => {
                if let Some(n) = s.strip_prefix("res").and_then(stage) {
                    Ok(GroupLabel::Res(n))
                } else if let Some(n) = s.strip_prefix("fpn@").and_then(stage) {
                    Ok(GroupLabel::Fpn(n))
                } else {
                    Err(format!("unknown parameter group `{s}`"))
                }
            }
        }
    }
}
