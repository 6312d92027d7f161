//! Elementwise activations.

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor4};

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    cache: Option<Tensor4<T>>,
}

impl<T: Elem> Relu<T> {
    pub fn new() -> Self {
        Relu { cache: None }
    }

    pub fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Tensor4<T> {
        let y = x.mapv(|v| if v > T::zero() { v } else { T::zero() });
        if train {
            self.cache = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let y = self
            .cache
            .take()
            .ok_or_else(|| Error::Input("relu backward without cached forward".into()))?;
        let mut dx = dy.clone();
        ndarray::Zip::from(&mut dx).and(&y).for_each(|d, &yo| {
            if yo <= T::zero() {
                *d = T::zero();
            }
        });
        Ok(dx)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid<T> {
    cache: Option<Tensor4<T>>,
}

impl<T: Elem> Sigmoid<T> {
    pub fn new() -> Self {
        Sigmoid { cache: None }
    }

    pub fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Tensor4<T> {
        let y = x.mapv(sigmoid_scalar);
        if train {
            self.cache = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let y = self
            .cache
            .take()
            .ok_or_else(|| Error::Input("sigmoid backward without cached forward".into()))?;
        let mut dx = dy.clone();
        ndarray::Zip::from(&mut dx).and(&y).for_each(|d, &yo| {
            *d = *d * yo * (T::one() - yo);
        });
        Ok(dx)
    }
}

pub fn sigmoid_scalar<T: Elem>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
    }

    #[test]
    fn relu_backward_masks_negative_inputs() {
        let mut relu = Relu::new();
        let x = Tensor4::from_shape_vec((1, 1, 1, 4), vec![-1.0, 0.0, 2.0, -3.0]).unwrap();
        relu.forward(&x, true);
        let dy = Tensor4::from_elem((1, 1, 1, 4), 1.0);
        let dx = relu.backward(&dy).unwrap();
        assert_eq!(
            dx.iter().copied().collect::<Vec<_>>(),
            vec![0.0, 0.0, 1.0, 0.0]
        );
    }
}
