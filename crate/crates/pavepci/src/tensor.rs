//! Tensor aliases and the scalar trait the network is generic over.
//!
//! Feature maps are rank-4 `(batch, channels, height, width)` arrays. The
//! whole network is generic over [`Elem`] so inference and training run in
//! `f32` while finite-difference verification runs in `f64`.

use ndarray::{Array1, Array2, Array3, Array4};

pub type Tensor1<T> = Array1<T>;
pub type Tensor2<T> = Array2<T>;
pub type Tensor3<T> = Array3<T>;
/// Feature map: `(batch, channels, height, width)`.
pub type Tensor4<T> = Array4<T>;

/// Scalar element of every tensor in the crate.
pub trait Elem:
    num_traits::Float
    + num_traits::NumAssign
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + rand::distr::uniform::SampleUniform
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Elem for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// `(batch, channels, height, width)` of a feature map.
pub fn dims4<T>(x: &Tensor4<T>) -> (usize, usize, usize, usize) {
    let d = x.dim();
    (d.0, d.1, d.2, d.3)
}
