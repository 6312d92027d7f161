//! Spatial attention: where to look.

use ndarray::Axis;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamVisitor, ParamVisitorMut};
use crate::tensor::{dims4, Elem, Tensor4};

/// Produces a `(B,1,H,W)` map: channel-wise average and max are stacked into
/// two channels, convolved with an odd `k x k` kernel (zero padding keeps
/// H x W), then squashed by a sigmoid.
#[derive(Debug, Clone)]
pub struct SpatialAttention<T> {
    pub kernel: usize,
    /// `2 -> 1` convolution; its single bias is the block's only bias term.
    pub conv: Conv2d<T>,
    cache: Option<Cache<T>>,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    map: Tensor4<T>,
    argmax_channel: Vec<usize>,
    channels: usize,
}

/// Default kernel size of the spatial-attention convolution.
pub const DEFAULT_SPATIAL_KERNEL: usize = 7;

impl<T: Elem> SpatialAttention<T> {
    pub fn new(kernel: usize, seed: u64, name: &str) -> Result<Self> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "spatial attention kernel must be odd and positive, got {kernel}"
            )));
        }
        let conv = Conv2d::new(2, 1, kernel, 1, (kernel - 1) / 2, true, seed, &format!("{name}.conv"));
        Ok(SpatialAttention {
            kernel,
            conv,
            cache: None,
        })
    }

    /// Returns the `(B,1,H,W)` attention map.
    pub fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        let (b, c, h, w) = dims4(x);
        if c == 0 {
            return Err(Error::Input("spatial attention needs at least 1 channel".into()));
        }
        if h == 0 || w == 0 {
            return Err(Error::Input("empty spatial extent".into()));
        }

        let inv = T::from_f64(1.0 / c as f64);
        let mut stack = Tensor4::<T>::zeros((b, 2, h, w));
        let mut argmax_channel = vec![0usize; b * h * w];
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let mut sum = T::zero();
                    let mut best = x[(bi, 0, i, j)];
                    let mut best_c = 0usize;
                    for ci in 0..c {
                        let v = x[(bi, ci, i, j)];
                        sum += v;
                        if v > best {
                            best = v;
                            best_c = ci;
                        }
                    }
                    stack[(bi, 0, i, j)] = sum * inv;
                    stack[(bi, 1, i, j)] = best;
                    argmax_channel[(bi * h + i) * w + j] = best_c;
                }
            }
        }

        let z = self.conv.forward(&stack, train)?;
        let map = z.mapv(crate::nn::sigmoid_scalar);
        if train {
            self.cache = Some(Cache {
                map: map.clone(),
                argmax_channel,
                channels: c,
            });
        }
        Ok(map)
    }

    /// Gradient of a loss wrt the input, given the gradient wrt the map.
    pub fn backward(&mut self, dmap: &Tensor4<T>) -> Result<Tensor4<T>> {
        let Cache {
            map,
            argmax_channel,
            channels,
        } = self
            .cache
            .take()
            .ok_or_else(|| Error::Input("spatial attention backward without forward".into()))?;
        let (b, _, h, w) = dims4(&map);

        let mut dz = dmap.clone();
        ndarray::Zip::from(&mut dz).and(&map).for_each(|d, &m| {
            *d = *d * m * (T::one() - m);
        });
        let dstack = self.conv.backward(&dz)?;

        let inv = T::from_f64(1.0 / channels as f64);
        let mut dx = Tensor4::<T>::zeros((b, channels, h, w));
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let davg = dstack[(bi, 0, i, j)] * inv;
                    for ci in 0..channels {
                        dx[(bi, ci, i, j)] += davg;
                    }
                    let bc = argmax_channel[(bi * h + i) * w + j];
                    dx[(bi, bc, i, j)] += dstack[(bi, 1, i, j)];
                }
            }
        }
        Ok(dx)
    }

    pub fn param_count(&self) -> usize {
        self.conv.weight.len() + self.conv.bias.as_ref().map_or(0, |b| b.len())
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        self.conv.visit(&crate::nn::join_path(prefix, "conv"), f);
    }

    pub fn visit_ref(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.conv.visit_ref(&crate::nn::join_path(prefix, "conv"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_gives_exactly_half() {
        let mut sa = SpatialAttention::<f64>::new(7, 3, "sa").unwrap();
        let x = Tensor4::zeros((1, 4, 5, 5));
        let m = sa.forward(&x, false).unwrap();
        assert_eq!(m.dim(), (1, 1, 5, 5));
        assert!(m.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn invariant_under_channel_permutation() {
        use rand::Rng;
        let mut rng = crate::seeds::rng_for(4, "sa-perm");
        let mut sa = SpatialAttention::<f64>::new(7, 5, "sa").unwrap();
        let x = Tensor4::from_shape_fn((2, 5, 3, 3), |_| rng.random_range(-1.0..1.0));
        let mut xp = x.clone();
        xp.invert_axis(Axis(1));
        let m1 = sa.forward(&x, false).unwrap();
        let m2 = sa.forward(&xp, false).unwrap();
        for (a, b) in m1.iter().zip(m2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_center_column_oracle_on_1x1_input() {
        // On a 1x1 spatial extent only the kernel center overlaps the input,
        // so the pre-sigmoid value is k[0,center]*avg + k[1,center]*max + bias.
        let mut sa = SpatialAttention::<f64>::new(7, 0, "sa").unwrap();
        let x = Tensor4::from_shape_vec((1, 3, 1, 1), vec![0.5, -1.0, 2.0]).unwrap();
        let avg = (0.5 - 1.0 + 2.0) / 3.0;
        let max = 2.0;
        let k_avg = sa.conv.weight.value[ndarray::IxDyn(&[0, 0, 3, 3])];
        let k_max = sa.conv.weight.value[ndarray::IxDyn(&[0, 1, 3, 3])];
        let bias = sa.conv.bias.as_ref().unwrap().value[0];
        let want = 1.0 / (1.0 + (-(k_avg * avg + k_max * max + bias)).exp());
        let m = sa.forward(&x, false).unwrap();
        assert!((m[(0, 0, 0, 0)] - want).abs() < 1e-14);
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(SpatialAttention::<f64>::new(6, 0, "sa").is_err());
    }
}
