//! Fully connected layer on `(B, in)` matrices.

use ndarray::{Array2, Axis};

use super::Param;
use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor2};

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `(out, in)`
    pub weight: Param<T>,
    /// `(out,)`; zero-initialized when present.
    pub bias: Option<Param<T>>,
    cache: Option<Tensor2<T>>,
}

impl<T: Elem> Linear<T> {
    pub fn new(
        in_features: usize,
        out_features: usize,
        with_bias: bool,
        seed: u64,
        name: &str,
    ) -> Self {
        let weight = Param::kaiming_uniform(
            &[out_features, in_features],
            in_features,
            seed,
            &format!("{name}.weight"),
        );
        let bias = with_bias.then(|| Param::zeros(&[out_features]));
        Linear {
            in_features,
            out_features,
            weight,
            bias,
            cache: None,
        }
    }

    fn weight2(&self) -> ndarray::ArrayView2<'_, T> {
        self.weight.value.view().into_dimensionality().unwrap()
    }

    pub fn forward(&mut self, x: &Tensor2<T>, train: bool) -> Result<Tensor2<T>> {
        if x.dim().1 != self.in_features {
            return Err(Error::Input(format!(
                "linear expects {} input features, got {}",
                self.in_features,
                x.dim().1
            )));
        }
        let mut y = x.dot(&self.weight2().t());
        if let Some(b) = &self.bias {
            let bv = b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for mut row in y.axis_iter_mut(Axis(0)) {
                row += &bv;
            }
        }
        if train {
            self.cache = Some(x.clone());
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor2<T>) -> Result<Tensor2<T>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::Input("linear backward without cached forward".into()))?;
        let dw: Array2<T> = dy.t().dot(&x);
        let mut wg = self
            .weight
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        wg += &dw;
        if let Some(b) = &mut self.bias {
            let db = dy.sum_axis(Axis(0));
            let mut bg = b
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            bg += &db;
        }
        Ok(dy.dot(&self.weight2()))
    }

    pub fn visit(&mut self, prefix: &str, f: &mut super::ParamVisitorMut<'_, T>) {
        f(&super::join_path(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&super::join_path(prefix, "bias"), b);
        }
    }

    pub fn visit_ref(&self, prefix: &str, f: &mut super::ParamVisitor<'_, T>) {
        f(&super::join_path(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&super::join_path(prefix, "bias"), b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_matches_manual_product() {
        let mut lin = Linear::<f64>::new(2, 1, true, 0, "l");
        lin.weight.value = ndarray::arr2(&[[2.0, -1.0]]).into_dyn();
        lin.bias.as_mut().unwrap().value[0] = 0.5;
        let x = ndarray::arr2(&[[3.0, 4.0]]);
        let y = lin.forward(&x, false).unwrap();
        assert_eq!(y[(0, 0)], 2.0 * 3.0 - 4.0 + 0.5);
    }

    #[test]
    fn backward_accumulates_gradients() {
        let mut lin = Linear::<f64>::new(3, 2, true, 1, "l");
        let x = ndarray::arr2(&[[1.0, 2.0, 3.0], [0.5, -1.0, 2.0]]);
        lin.forward(&x, true).unwrap();
        let dy = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let dx = lin.backward(&dy).unwrap();
        assert_eq!(dx.dim(), (2, 3));
        // dW = dy^T x
        assert_eq!(lin.weight.grad[ndarray::IxDyn(&[0, 0])], 1.0);
        assert_eq!(lin.weight.grad[ndarray::IxDyn(&[1, 2])], 2.0);
        assert_eq!(lin.bias.as_ref().unwrap().grad[0], 1.0);
    }
}
