//! Ablation specs: which parameter groups are tuned, and how many scalars
//! that amounts to.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::groups::GroupLabel;
use crate::model::{ModelGraph, ParamInventory};

/// The twelve fine-tuning configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSpec {
    TuneAll,
    LinearProbing,
    Stem,
    Res2,
    Res2Fpn,
    Res3,
    Res3Fpn,
    Res4,
    Res4Fpn,
    Res5,
    Res5Fpn,
    Rpn,
}

impl AblationSpec {
    pub const ALL: [AblationSpec; 12] = [
        AblationSpec::TuneAll,
        AblationSpec::LinearProbing,
        AblationSpec::Stem,
        AblationSpec::Res2,
        AblationSpec::Res2Fpn,
        AblationSpec::Res3,
        AblationSpec::Res3Fpn,
        AblationSpec::Res4,
        AblationSpec::Res4Fpn,
        AblationSpec::Res5,
        AblationSpec::Res5Fpn,
        AblationSpec::Rpn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationSpec::TuneAll => "tune_all",
            AblationSpec::LinearProbing => "linear_probing",
            AblationSpec::Stem => "stem",
            AblationSpec::Res2 => "res2",
            AblationSpec::Res2Fpn => "res2_fpn",
            AblationSpec::Res3 => "res3",
            AblationSpec::Res3Fpn => "res3_fpn",
            AblationSpec::Res4 => "res4",
            AblationSpec::Res4Fpn => "res4_fpn",
            AblationSpec::Res5 => "res5",
            AblationSpec::Res5Fpn => "res5_fpn",
            AblationSpec::Rpn => "rpn",
        }
    }

    /// Stage index for the residual-stage specs.
    fn stage(self) -> Option<(u8, bool)> {
        match self {
            AblationSpec::Res2 => Some((2, false)),
            AblationSpec::Res2Fpn => Some((2, true)),
            AblationSpec::Res3 => Some((3, false)),
            AblationSpec::Res3Fpn => Some((3, true)),
            AblationSpec::Res4 => Some((4, false)),
            AblationSpec::Res4Fpn => Some((4, true)),
            AblationSpec::Res5 => Some((5, false)),
            AblationSpec::Res5Fpn => Some((5, true)),
            _ => None,
        }
    }

    pub fn trainable_groups(self) -> BTreeSet<GroupLabel> {
        match self {
            AblationSpec::TuneAll => GroupLabel::all().into_iter().collect(),
            AblationSpec::LinearProbing => [GroupLabel::RoiHeads].into(),
            AblationSpec::Stem => [GroupLabel::Stem].into(),
            AblationSpec::Rpn => [GroupLabel::Rpn].into(),
            spec => {
                let (n, fpn) = spec.stage().expect("remaining specs are stages");
                let mut s = BTreeSet::from([GroupLabel::Res(n)]);
                if fpn {
                    s.insert(GroupLabel::Fpn(n));
                }
                s
            }
        }
    }
}

impl fmt::Display for AblationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error(
    "unknown ablation `{0}` (expected one of tune_all, linear_probing, stem, res2, res2_fpn, res3, res3_fpn, res4, res4_fpn, res5, res5_fpn, rpn)"
)]
pub struct UnknownAblation(pub String);

impl FromStr for AblationSpec {
    type Err = UnknownAblation;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AblationSpec::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| UnknownAblation(s.to_string()))
    }
}

/// Sets `trainable` on exactly the parameters of the spec's groups.
pub fn apply_surgery(model: &mut ModelGraph, spec: AblationSpec) {
    let groups = spec.trainable_groups();
    for p in model.params_mut() {
        p.trainable = groups.contains(&p.group);
    }
}

/// Number of scalars tuned under `spec`.
pub fn ledger(inventory: &(impl ParamInventory + ?Sized), spec: AblationSpec) -> usize {
    let groups = spec.trainable_groups();
    inventory.group_sizes().iter().filter(|(g, _)| groups.contains(g)).map(|(_, n)| n).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LedgerEntry {
    pub spec: AblationSpec,
    pub parameter_count: usize,
}

/// One row per ablation, in canonical order.
pub fn ledger_report(inventory: &(impl ParamInventory + ?Sized)) -> Vec<LedgerEntry> {
    let sizes = inventory.group_sizes();
    AblationSpec::ALL
        .into_iter()
        .map(|spec| {
            let groups = spec.trainable_groups();
            LedgerEntry { spec, parameter_count: sizes.iter().filter(|(g, _)| groups.contains(g)).map(|(_, n)| n).sum() }
        })
        .collect()
}

/// `1.23M`, `9.5K` style rendering.
pub fn human_count(n: usize) -> String {
    let v = n as f64;
    if v >= 1e6 {
        format!("{:.2}M", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.1}K", v / 1e3)
    } else {
        n.to_string()
    }
}

pub fn ledger_csv(rows: &[LedgerEntry]) -> String {
    let mut out = String::from("ablation,parameters\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.spec, r.parameter_count));
    }
    out
}

pub fn ledger_table(rows: &[LedgerEntry]) -> String {
    let width = rows.iter().map(|r| r.spec.name().len()).max().unwrap_or(8).max("ablation".len());
    let mut out = format!("{:<width$}  {:>12}  {:>8}\n", "ablation", "parameters", "approx");
    for r in rows {
        out.push_str(&format!("{:<width$}  {:>12}  {:>8}\n", r.spec.name(), r.parameter_count, human_count(r.parameter_count)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchConfig};

    #[test]
    fn names_round_trip() {
        for s in AblationSpec::ALL {
            assert_eq!(s.name().parse::<AblationSpec>().unwrap(), s);
        }
        assert!("res6".parse::<AblationSpec>().is_err());
    }

    #[test]
    fn group_sets() {
        assert_eq!(AblationSpec::Res3.trainable_groups(), [GroupLabel::Res(3)].into());
        assert_eq!(AblationSpec::Res4Fpn.trainable_groups(), [GroupLabel::Res(4), GroupLabel::Fpn(4)].into());
        assert_eq!(AblationSpec::LinearProbing.trainable_groups(), [GroupLabel::RoiHeads].into());
        assert_eq!(AblationSpec::TuneAll.trainable_groups().len(), 11);
    }

    #[test]
    fn surgery_sets_flags_exactly() {
        let mut m = build_model(&ArchConfig::mini(), 0).unwrap();
        apply_surgery(&mut m, AblationSpec::TuneAll);
        assert_eq!(m.frozen_count(), 0);
        apply_surgery(&mut m, AblationSpec::Rpn);
        assert!(m.params().iter().all(|p| p.trainable == (p.group == GroupLabel::Rpn)));
    }

    #[test]
    fn mini_report_is_total() {
        let m = build_model(&ArchConfig::mini(), 0).unwrap();
        let rows = ledger_report(&m);
        assert_eq!(rows.len(), 12);
        assert!(rows.iter().all(|r| r.parameter_count > 0));
        assert_eq!(rows[0].parameter_count, m.total_params());
    }

    #[test]
    fn fpn_rows_add_the_fpn_level() {
        let cfg = ArchConfig::full_scale();
        let sizes = cfg.group_sizes();
        for (plain, joint, n) in [
            (AblationSpec::Res2, AblationSpec::Res2Fpn, 2),
            (AblationSpec::Res3, AblationSpec::Res3Fpn, 3),
            (AblationSpec::Res4, AblationSpec::Res4Fpn, 4),
            (AblationSpec::Res5, AblationSpec::Res5Fpn, 5),
        ] {
            assert_eq!(ledger(&cfg, joint) - ledger(&cfg, plain), sizes[&GroupLabel::Fpn(n)]);
        }
    }

    #[test]
    fn table_renders_every_row() {
        let rows = ledger_report(&ArchConfig::full_scale());
        let t = ledger_table(&rows);
        assert_eq!(t.lines().count(), 13);
        assert!(ledger_csv(&rows).starts_with("ablation,parameters\ntune_all,"));
        assert_eq!(human_count(9_536), "9.5K");
    }
}
