//! Run configuration file: a TOML document with `[arch]`, `[train]`,
//! `[augment]`, `[eval]` and `[detector]` sections. Every key is optional.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::experiment::EvalConfig;
use crate::model::{ArchConfig, DetectorConfig, ModelError};
use crate::train::{TrainConfig, TrainError};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
    pub detector: DetectorConfig,
}

/// A config problem tied to a source location when one is known.
#[derive(Debug, thiserror::Error, PartialEq)]
#[error("{origin}{}: {field}: {message}", line.map(|l| format!(":{l}")).unwrap_or_default())]
pub struct ConfigError {
    pub origin: String,
    pub line: Option<usize>,
    /// `section.key`, or the section alone for structural errors.
    pub field: String,
    pub message: String,
}

impl RunConfig {
    /// Desk-scale defaults: the mini architecture with shortened check
    /// interval and patience.
    pub fn desk() -> Self {
        Self { train: TrainConfig::desk(), ..Self::default() }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            origin: path.display().to_string(),
            line: None,
            field: String::new(),
            message: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses and validates. Missing keys take [`RunConfig::desk`] values.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        // Typed pass over the user's text alone: errors keep their spans.
        toml::from_str::<RunConfig>(text).map_err(|e| {
            let line = e.span().map(|s| line_of_offset(text, s.start));
            let src = line.and_then(|l| text.lines().nth(l - 1)).unwrap_or("");
            let key = src.split_once('=').map(|(k, _)| k.trim()).filter(|k| !k.is_empty());
            let field = match (line.and_then(|l| section_at(text, l)), key) {
                (Some(s), Some(k)) => format!("{s}.{k}"),
                (s, k) => s.or(k.map(String::from)).unwrap_or_default(),
            };
            ConfigError { origin: origin.into(), line, field, message: e.message().trim().to_string() }
        })?;
        let mut base = toml::Table::try_from(Self::desk()).expect("defaults serialise");
        let user: toml::Table = text.parse().expect("already parsed");
        for (section, value) in user {
            if let (Some(toml::Value::Table(dst)), toml::Value::Table(src)) = (base.get_mut(&section), value) {
                dst.extend(src);
            }
        }
        let cfg: RunConfig = toml::Value::Table(base).try_into().expect("merged table has the checked shape");
        cfg.validate().map_err(|(section, key, message)| ConfigError {
            origin: origin.into(),
            line: locate(text, Some(section), key),
            field: format!("{section}.{key}"),
            message,
        })?;
        Ok(cfg)
    }

    /// Semantic checks on every section.
    pub fn validate(&self) -> Result<(), (&'static str, &'static str, String)> {
        let model = |section, e: ModelError| match e {
            ModelError::Config { field, reason } => (section, field, reason),
            other => (section, "", other.to_string()),
        };
        self.arch.validate().map_err(|e| model("arch", e))?;
        self.detector.validate().map_err(|e| model("detector", e))?;
        self.train.validate().map_err(|e| match e {
            TrainError::Config { field, reason } => ("train", field, reason),
            other => ("train", "", other.to_string()),
        })?;
        self.augment.validate().map_err(|e| ("augment", e.field, e.reason))?;
        if !(0.0..=1.0).contains(&self.eval.score_floor) {
            return Err(("eval", "score_floor", "must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Name of the `[section]` in force at a 1-based line.
fn section_at(text: &str, line: usize) -> Option<String> {
    text.lines().take(line).filter_map(header).last()
}

fn header(line: &str) -> Option<String> {
    let t = line.trim();
    (t.starts_with('[') && !t.starts_with("[[")).then(|| t.trim_matches(|c| c == '[' || c == ']').trim().to_string())
}

/// 1-based line of `key = ...` inside `section` (or before any header).
fn locate(text: &str, section: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<String> = None;
    for (i, l) in text.lines().enumerate() {
        if let Some(h) = header(l) {
            current = Some(h);
            continue;
        }
        let lhs = l.split('=').next().unwrap_or("").trim();
        if l.contains('=') && lhs == key && current.as_deref() == section {
            return Some(i + 1);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_desk_defaults() {
        assert_eq!(RunConfig::parse("", "x.toml").unwrap(), RunConfig::desk());
    }

    #[test]
    fn printed_defaults_parse_back() {
        let cfg = RunConfig::desk();
        assert_eq!(RunConfig::parse(&cfg.to_toml(), "p.toml").unwrap(), cfg);
    }

    #[test]
    fn partial_sections_override_defaults() {
        let cfg = RunConfig::parse("[train]\nmax_iters = 50\n\n[eval]\niou_step = \"coarse\"\n", "c.toml").unwrap();
        assert_eq!(cfg.train.max_iters, 50);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.eval.iou_step, crate::metrics::ThresholdStep::Coarse);
    }

    #[test]
    fn validation_error_names_field_and_line() {
        let text = "[arch]\nnum_classes = 1\n\n[train]\nbatch_size = 2\npatience_checks = 0\n";
        let e = RunConfig::parse(text, "run.toml").unwrap_err();
        assert_eq!(e.field, "train.patience_checks");
        assert_eq!(e.line, Some(6));
        assert!(e.to_string().starts_with("run.toml:6: train.patience_checks:"), "{e}");
    }

    #[test]
    fn unknown_key_names_field_and_line() {
        let e = RunConfig::parse("[augment]\nflip_prob = 0.5\nblurr = 1\n", "a.toml").unwrap_err();
        assert_eq!(e.line, Some(3), "{e}");
        assert_eq!(e.field, "augment.blurr", "{e}");
    }

    #[test]
    fn wrong_type_and_syntax_errors_have_lines() {
        let e = RunConfig::parse("[train]\nlearning_rate = \"fast\"\n", "t.toml").unwrap_err();
        assert_eq!((e.field.as_str(), e.line), ("train.learning_rate", Some(2)), "{e}");
        let e = RunConfig::parse("[train]\nmax_iters = = 3\n", "t.toml").unwrap_err();
        assert_eq!(e.line, Some(2), "{e}");
    }

    #[test]
    fn unknown_section_is_rejected() {
        let e = RunConfig::parse("[model]\nx = 1\n", "m.toml").unwrap_err();
        assert_eq!((e.field.as_str(), e.line), ("model", Some(1)));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::desk();
        let mut b = a.clone();
        b.train.seed = 1;
        assert_eq!(a.hash(), RunConfig::desk().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
