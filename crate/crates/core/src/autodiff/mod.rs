//! Minimal reverse-mode automatic differentiation over dense `f32` tensors.

mod checkpoint;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{Graph, OpKind, RoiBox, Var};
pub use tensor::Tensor;

pub(crate) use graph::{sigmoid, softmax_in_place};

use crate::groups::GroupLabel;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: String, detail: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

/// A learnable tensor owned by one parameter group.
#[derive(Clone, Debug)]
pub struct Parameter {
    /// Dotted path, e.g. `backbone.res3.block1.conv2.weight`.
    pub path: String,
    pub group: GroupLabel,
    pub tensor: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(path: impl Into<String>, group: GroupLabel, tensor: Tensor) -> Self {
        Self { path: path.into(), group, tensor, trainable: true }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

/// Plain SGD: `data -= lr * grad` on trainable parameters, then every
/// gradient slot is zeroed. Frozen parameters are never written.
pub fn sgd_step(params: &mut [Parameter], learning_rate: f32) {
    for p in params.iter_mut() {
        if p.trainable && learning_rate != 0.0 {
            if let Some(g) = p.tensor.grad().map(<[f32]>::to_vec) {
                p.tensor.data_mut().iter_mut().zip(&g).for_each(|(w, d)| *w -= learning_rate * d);
            }
        }
        p.tensor.zero_grad();
    }
}

/// Moves gradients recorded on `graph` into the matching parameters.
/// Frozen parameters never receive anything.
pub fn accumulate_param_grads(graph: &Graph, params: &mut [Parameter]) {
    for (idx, g) in graph.param_grads() {
        if let Some(p) = params.get_mut(idx) {
            if p.trainable {
                p.tensor.accumulate_grad(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f32, g: f32, trainable: bool) -> Parameter {
        let mut t = Tensor::new([1], vec![v]);
        t.accumulate_grad(&[g]);
        Parameter { path: "w".into(), group: GroupLabel::Stem, tensor: t, trainable }
    }

    #[test]
    fn sgd_update_rule() {
        let mut p = vec![param(1.0, 0.5, true)];
        sgd_step(&mut p, 0.01);
        assert_eq!(p[0].tensor.data(), &[0.995]);
        assert_eq!(p[0].tensor.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn sgd_zero_rate_is_noop() {
        let mut p = vec![param(1.0, 0.5, true)];
        sgd_step(&mut p, 0.0);
        assert_eq!(p[0].tensor.data(), &[1.0]);
    }

    #[test]
    fn sgd_skips_frozen() {
        let mut p = vec![param(1.0, 0.5, false)];
        sgd_step(&mut p, 0.01);
        assert_eq!(p[0].tensor.data(), &[1.0]);
        sgd_step(&mut [], 0.01);
    }

    #[test]
    fn frozen_parameter_survives_training_step() {
        let mut params = vec![
            Parameter::new("a", GroupLabel::Stem, Tensor::new([1, 2], vec![0.3, -0.7])),
            Parameter::new("b", GroupLabel::Rpn, Tensor::new([1, 2], vec![1.1, 0.4])),
        ];
        params[0].trainable = false;
        let before = params[0].tensor.data().to_vec();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([1, 2], vec![2.0, 3.0]));
        let a = g.param(0, &params[0].tensor, params[0].trainable);
        let b = g.param(1, &params[1].tensor, params[1].trainable);
        let h = g.linear(x, a, None).unwrap();
        let y = g.linear(x, b, None).unwrap();
        let s = g.add(h, y).unwrap();
        let loss = g.sum(s).unwrap();
        g.backward(loss).unwrap();
        accumulate_param_grads(&g, &mut params);
        sgd_step(&mut params, 0.1);
        assert_eq!(params[0].tensor.data(), before.as_slice());
        assert_ne!(params[1].tensor.data(), &[1.1, 0.4]);
    }
}
