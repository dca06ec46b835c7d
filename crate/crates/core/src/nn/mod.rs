//! Convolutional front-end layers and the Adam optimizer.

mod adam;
mod batchnorm;
mod conv;
mod pool;

pub use adam::{adam_step, AdamState};
pub use batchnorm::{
    batch_norm_infer, batch_norm_train, BatchNorm2D, BatchStats, DEFAULT_EPSILON as BN_DEFAULT_EPSILON,
    DEFAULT_MOMENTUM as BN_DEFAULT_MOMENTUM,
};
pub use conv::{conv2d, Conv2D, Padding};
pub use pool::{max_pool2d, MaxPool2D};

use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, Var};

/// Forward-pass mode. Batch normalisation uses batch statistics in
/// `Train` and running statistics in `Infer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Records the current value on `tape`, as a leaf when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Var<'t> {
        if trainable {
            tape.leaf(self.value.clone())
        } else {
            tape.constant(self.value.clone())
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}
