//! Layer primitives with explicit forward/backward passes.
//!
//! Every layer caches what its backward pass needs when run with
//! `train = true` and exposes its learnable tensors through [`visit`]
//! callbacks so optimizers, checkpointing, and parameter accounting can walk
//! a model without knowing its structure.

mod act;
mod bn;
mod conv;
mod linear;
mod pool;

pub use act::{sigmoid_scalar, Relu, Sigmoid};
pub use bn::BatchNorm2d;
pub use conv::Conv2d;
pub use linear::Linear;
pub use pool::{global_avg_pool, global_avg_pool_backward, AvgPool2d, MaxPool2d};

use ndarray::{ArrayD, IxDyn};

use crate::seeds;
use crate::tensor::Elem;

/// A learnable tensor and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Elem> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Param {
            value: ArrayD::zeros(IxDyn(shape)),
            grad: ArrayD::zeros(IxDyn(shape)),
        }
    }

    /// Kaiming-uniform fill for ReLU fan-in: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
    ///
    /// The draw is seeded from `(seed, name)` so a parameter's initial value
    /// depends only on its own name, never on how many parameters were
    /// created before it.
    pub fn kaiming_uniform(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Self {
        use rand::Rng;
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut rng = seeds::rng_for(seed, name);
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            T::from_f64(rng.random_range(-bound..bound))
        });
        Param {
            grad: ArrayD::zeros(value.raw_dim()),
            value,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Callback over named learnable parameters (mutable).
pub type ParamVisitorMut<'c, T> = dyn FnMut(&str, &mut Param<T>) + 'c;
/// Callback over named learnable parameters (shared).
pub type ParamVisitor<'c, T> = dyn FnMut(&str, &Param<T>) + 'c;
/// Callback over named non-learnable state (batch-norm running statistics).
pub type BufferVisitor<'c, T> = dyn FnMut(&str, &mut ArrayD<T>) + 'c;

/// Joins a parameter path, skipping the leading dot for an empty prefix.
pub fn join_path(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}
