//! The detector: residual backbone, feature pyramid, proposal head and the
//! three ROI heads, plus its parameter store.

pub mod boxes;
mod config;
mod layout;
mod net;
mod targets;

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{pyramid_shapes, ArchConfig, BlockKind};
pub use layout::{param_layout, Init, ParamSpec};
pub use net::{forward_infer, forward_train, Detection, LossBundle};
pub use targets::DetectorConfig;

use crate::autodiff::{AutodiffError, Checkpoint, CheckpointError, Parameter, Tensor};
use crate::groups::GroupLabel;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid architecture config: `{field}` {reason}")]
    Config { field: &'static str, reason: String },
    #[error("image size {height}x{width} must be a positive multiple of 32 (pad upstream)")]
    ImageSize { height: usize, width: usize },
    #[error("batch images differ in size")]
    MixedBatch,
    #[error("category id {category_id} outside 1..={num_classes}")]
    Category { category_id: u32, num_classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Anything that can report how many scalars each parameter group holds.
pub trait ParamInventory {
    fn group_sizes(&self) -> BTreeMap<GroupLabel, usize>;

    fn total_params(&self) -> usize {
        self.group_sizes().values().sum()
    }
}

impl ParamInventory for [ParamSpec] {
    fn group_sizes(&self) -> BTreeMap<GroupLabel, usize> {
        let mut m = BTreeMap::new();
        for s in self {
            *m.entry(s.group).or_insert(0) += s.numel();
        }
        m
    }
}

impl ParamInventory for Vec<ParamSpec> {
    fn group_sizes(&self) -> BTreeMap<GroupLabel, usize> {
        self.as_slice().group_sizes()
    }
}

/// Shape-only inventory straight from a config; no weights are allocated.
impl ParamInventory for ArchConfig {
    fn group_sizes(&self) -> BTreeMap<GroupLabel, usize> {
        param_layout(self).group_sizes()
    }
}

/// A materialised detector: config plus every parameter, labelled by group.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    config: ArchConfig,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

/// Deterministically initialises a detector from `seed`.
pub fn build_model(config: &ArchConfig, seed: u64) -> Result<ModelGraph, ModelError> {
    ModelGraph::build(config, seed)
}

impl ModelGraph {
    pub fn build(config: &ArchConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Parameter> = param_layout(config)
            .into_iter()
            .map(|s| {
                let tensor = match s.init {
                    Init::Kaiming { fan_in } => Tensor::randn(s.shape.clone(), (2.0 / fan_in as f32).sqrt(), &mut rng),
                    Init::Normal { std } => Tensor::randn(s.shape.clone(), std, &mut rng),
                    Init::Zeros => Tensor::zeros(s.shape.clone()),
                    Init::Ones => Tensor::full(s.shape.clone(), 1.0),
                };
                Parameter::new(s.path, s.group, tensor)
            })
            .collect();
        let index = params.iter().enumerate().map(|(i, p)| (p.path.clone(), i)).collect();
        Ok(Self { config: config.clone(), params, index })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param_index(&self, path: &str) -> Option<usize> {
        self.index.get(path).copied()
    }

    pub fn param(&self, path: &str) -> Option<&Parameter> {
        self.param_index(path).map(|i| &self.params[i])
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(&self.params)
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<(), ModelError> {
        ckpt.restore_into(&mut self.params)?;
        Ok(())
    }

    pub fn frozen_count(&self) -> usize {
        self.params.iter().filter(|p| !p.trainable).map(Parameter::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.clear_grad());
    }
}

impl ParamInventory for ModelGraph {
    fn group_sizes(&self) -> BTreeMap<GroupLabel, usize> {
        let mut m = BTreeMap::new();
        for p in &self.params {
            *m.entry(p.group).or_insert(0) += p.numel();
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn partition_covers_every_parameter_once() {
        let m = build_model(&ArchConfig::mini(), 7).unwrap();
        let paths: HashSet<_> = m.params().iter().map(|p| p.path.as_str()).collect();
        assert_eq!(paths.len(), m.params().len());
        let by_group: usize = m.group_sizes().values().sum();
        let total: usize = m.params().iter().map(Parameter::numel).sum();
        assert_eq!(by_group, total);
        assert_eq!(m.group_sizes().len(), 11);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_model(&ArchConfig::mini(), 3).unwrap();
        let b = build_model(&ArchConfig::mini(), 3).unwrap();
        let c = build_model(&ArchConfig::mini(), 4).unwrap();
        assert_eq!(a.checkpoint().content_hash(), b.checkpoint().content_hash());
        assert_ne!(a.checkpoint().content_hash(), c.checkpoint().content_hash());
    }

    #[test]
    fn invalid_config_fails_with_field() {
        let mut cfg = ArchConfig::mini();
        cfg.num_classes = 0;
        let e = build_model(&cfg, 0).unwrap_err().to_string();
        assert!(e.contains("num_classes"), "{e}");
    }

    #[test]
    fn shape_only_inventory_matches_materialised() {
        let cfg = ArchConfig::mini();
        let m = build_model(&cfg, 0).unwrap();
        assert_eq!(cfg.group_sizes(), m.group_sizes());
    }
}
