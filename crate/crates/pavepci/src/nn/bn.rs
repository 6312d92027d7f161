//! Batch normalization over the channel axis of `(B,C,H,W)`.

use ndarray::{ArrayD, IxDyn};

use super::Param;
use crate::error::{Error, Result};
use crate::tensor::{dims4, Elem, Tensor1, Tensor4};

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    /// Scale (gamma), initialized to one.
    pub weight: Param<T>,
    /// Shift (beta), initialized to zero.
    pub bias: Param<T>,
    pub running_mean: ArrayD<T>,
    pub running_var: ArrayD<T>,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Tensor4<T>,
    ivar: Tensor1<T>,
}

impl<T: Elem> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        let mut weight = Param::zeros(&[channels]);
        weight.value.fill(T::one());
        let mut running_var = ArrayD::zeros(IxDyn(&[channels]));
        running_var.fill(T::one());
        BatchNorm2d {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            weight,
            bias: Param::zeros(&[channels]),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        let (b, c, h, w) = dims4(x);
        if c != self.channels {
            return Err(Error::Input(format!(
                "batchnorm expects {} channels, got {c}",
                self.channels
            )));
        }
        let gamma = &self.weight.value;
        let beta = &self.bias.value;
        let mut y = Tensor4::<T>::zeros(x.raw_dim());

        if !train {
            for ci in 0..c {
                let ivar =
                    T::one() / T::from_f64((self.running_var[ci].as_f64() + self.eps).sqrt());
                let mean = self.running_mean[ci];
                let g = gamma[ci] * ivar;
                let bt = beta[ci];
                for bi in 0..b {
                    let xs = x.index_axis(ndarray::Axis(0), bi);
                    let xs = xs.index_axis(ndarray::Axis(0), ci);
                    let mut ys = y.index_axis_mut(ndarray::Axis(0), bi);
                    let mut ys = ys.index_axis_mut(ndarray::Axis(0), ci);
                    ndarray::Zip::from(&mut ys).and(&xs).for_each(|yo, &xi| {
                        *yo = (xi - mean) * g + bt;
                    });
                }
            }
            return Ok(y);
        }

        let n = (b * h * w) as f64;
        let mut xhat = Tensor4::<T>::zeros(x.raw_dim());
        let mut ivars = Tensor1::<T>::zeros(c);
        for ci in 0..c {
            let mut sum = T::zero();
            for bi in 0..b {
                let plane = x.index_axis(ndarray::Axis(0), bi);
                sum += plane.index_axis(ndarray::Axis(0), ci).sum();
            }
            let mean = sum / T::from_f64(n);
            let mut sq = T::zero();
            for bi in 0..b {
                let plane = x.index_axis(ndarray::Axis(0), bi);
                for &v in plane.index_axis(ndarray::Axis(0), ci).iter() {
                    let d = v - mean;
                    sq += d * d;
                }
            }
            let var = sq / T::from_f64(n);
            let ivar = T::one() / T::from_f64((var.as_f64() + self.eps).sqrt());
            ivars[ci] = ivar;

            let g = gamma[ci];
            let bt = beta[ci];
            for bi in 0..b {
                let xs = x.index_axis(ndarray::Axis(0), bi);
                let xs = xs.index_axis(ndarray::Axis(0), ci);
                let mut xh = xhat.index_axis_mut(ndarray::Axis(0), bi);
                let mut xh = xh.index_axis_mut(ndarray::Axis(0), ci);
                let mut ys = y.index_axis_mut(ndarray::Axis(0), bi);
                let mut ys = ys.index_axis_mut(ndarray::Axis(0), ci);
                ndarray::Zip::from(&mut ys)
                    .and(&mut xh)
                    .and(&xs)
                    .for_each(|yo, xho, &xi| {
                        let xn = (xi - mean) * ivar;
                        *xho = xn;
                        *yo = xn * g + bt;
                    });
            }

            // Running statistics use the unbiased variance, matching common
            // framework behavior.
            let mom = T::from_f64(self.momentum);
            let var_unbiased = if n > 1.0 {
                var * T::from_f64(n / (n - 1.0))
            } else {
                var
            };
            self.running_mean[ci] = self.running_mean[ci] * (T::one() - mom) + mean * mom;
            self.running_var[ci] = self.running_var[ci] * (T::one() - mom) + var_unbiased * mom;
        }
        self.cache = Some(BnCache { xhat, ivar: ivars });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let BnCache { xhat, ivar } = self
            .cache
            .take()
            .ok_or_else(|| Error::Input("batchnorm backward without cached forward".into()))?;
        let (b, c, h, w) = dims4(&xhat);
        let n = T::from_f64((b * h * w) as f64);
        let mut dx = Tensor4::<T>::zeros(xhat.raw_dim());

        for ci in 0..c {
            let mut dgamma = T::zero();
            let mut dbeta = T::zero();
            for bi in 0..b {
                let dyp = dy.index_axis(ndarray::Axis(0), bi);
                let dyp = dyp.index_axis(ndarray::Axis(0), ci);
                let xhp = xhat.index_axis(ndarray::Axis(0), bi);
                let xhp = xhp.index_axis(ndarray::Axis(0), ci);
                ndarray::Zip::from(&dyp).and(&xhp).for_each(|&d, &xh| {
                    dgamma += d * xh;
                    dbeta += d;
                });
            }
            self.weight.grad[ci] += dgamma;
            self.bias.grad[ci] += dbeta;

            let scale = self.weight.value[ci] * ivar[ci] / n;
            for bi in 0..b {
                let dyp = dy.index_axis(ndarray::Axis(0), bi);
                let dyp = dyp.index_axis(ndarray::Axis(0), ci);
                let xhp = xhat.index_axis(ndarray::Axis(0), bi);
                let xhp = xhp.index_axis(ndarray::Axis(0), ci);
                let mut dxp = dx.index_axis_mut(ndarray::Axis(0), bi);
                let mut dxp = dxp.index_axis_mut(ndarray::Axis(0), ci);
                ndarray::Zip::from(&mut dxp)
                    .and(&dyp)
                    .and(&xhp)
                    .for_each(|o, &d, &xh| {
                        *o = scale * (n * d - dbeta - xh * dgamma);
                    });
            }
        }
        Ok(dx)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut super::ParamVisitorMut<'_, T>) {
        f(&super::join_path(prefix, "weight"), &mut self.weight);
        f(&super::join_path(prefix, "bias"), &mut self.bias);
    }

    pub fn visit_ref(&self, prefix: &str, f: &mut super::ParamVisitor<'_, T>) {
        f(&super::join_path(prefix, "weight"), &self.weight);
        f(&super::join_path(prefix, "bias"), &self.bias);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut super::BufferVisitor<'_, T>) {
        f(
            &super::join_path(prefix, "running_mean"),
            &mut self.running_mean,
        );
        f(
            &super::join_path(prefix, "running_var"),
            &mut self.running_var,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_forward_normalizes_per_channel() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        let x = Tensor4::from_shape_fn((2, 2, 3, 3), |(b, c, i, j)| {
            (b * 100 + c * 10 + i * 3 + j) as f64
        });
        let y = bn.forward(&x, true).unwrap();
        for c in 0..2 {
            let mut vals = vec![];
            for b in 0..2 {
                vals.extend(
                    y.index_axis(ndarray::Axis(0), b)
                        .index_axis(ndarray::Axis(0), c)
                        .iter()
                        .copied(),
                );
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn eval_uses_running_stats() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        // Fresh statistics: mean 0, var 1 -> eval is identity up to eps.
        let x = Tensor4::from_shape_fn((1, 1, 2, 2), |(_, _, i, j)| (i * 2 + j) as f64);
        let y = bn.forward(&x, false).unwrap();
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        use rand::Rng;
        let mut rng = crate::seeds::rng_for(3, "bn-fd");
        let x = Tensor4::from_shape_fn((2, 2, 3, 3), |_| rng.random_range(-2.0..2.0f64));
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.weight.value[0] = 1.3;
        bn.weight.value[1] = 0.7;
        bn.bias.value[0] = 0.1;

        let y = bn.forward(&x, true).unwrap();
        let dy = Tensor4::from_elem(y.raw_dim(), 1.0);
        // sum(y) has zero input-gradient through normalization alone, so use a
        // weighted sum to get a nontrivial signal.
        let wgt = Tensor4::from_shape_fn(y.raw_dim(), |(b, c, i, j)| {
            ((b + 2 * c + 3 * i + 5 * j) % 7) as f64 / 3.0 - 1.0
        });
        let dyw = &dy * &wgt;
        let dx = bn.backward(&dyw).unwrap();

        let loss = |bn: &BatchNorm2d<f64>, x: &Tensor4<f64>| {
            let mut fresh = bn.clone();
            (&fresh.forward(x, true).unwrap() * &wgt).sum()
        };
        let eps = 1e-6;
        for idx in [(0, 0, 0, 0), (1, 1, 2, 2), (0, 1, 1, 2)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let num = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * eps);
            assert!(
                (num - dx[idx]).abs() < 1e-6,
                "dx mismatch at {idx:?}: {num} vs {}",
                dx[idx]
            );
        }
    }
}
