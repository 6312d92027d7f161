//! Spatial pooling layers.

use crate::error::{Error, Result};
use crate::tensor::{dims4, Elem, Tensor2, Tensor4};

/// Max pooling with implicit negative-infinity padding.
///
/// Ties are broken toward the first maximal element in row-major window scan
/// order, so the subgradient routing is deterministic.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Per output element, the linear index of its source in the input.
    argmax: Option<(Vec<usize>, [usize; 4], [usize; 4])>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        MaxPool2d {
            kernel,
            stride,
            padding,
            argmax: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward<T: Elem>(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        let (b, c, h, w) = dims4(x);
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(Error::Input(format!(
                "maxpool input {h}x{w} too small for kernel {}",
                self.kernel
            )));
        }
        let (oh, ow) = self.output_hw(h, w);
        let mut y = Tensor4::<T>::zeros((b, c, oh, ow));
        let mut arg = vec![0usize; b * c * oh * ow];
        let xs = x.as_slice().expect("contiguous input");
        let ys = y.as_slice_mut().expect("contiguous output");

        for bi in 0..b {
            for ci in 0..c {
                let plane = (bi * c + ci) * h * w;
                let oplane = (bi * c + ci) * oh * ow;
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0usize;
                        for ki in 0..self.kernel {
                            let ii = (oi * self.stride + ki) as isize - self.padding as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for kj in 0..self.kernel {
                                let jj =
                                    (oj * self.stride + kj) as isize - self.padding as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                let idx = plane + ii as usize * w + jj as usize;
                                if xs[idx] > best {
                                    best = xs[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        ys[oplane + oi * ow + oj] = best;
                        arg[oplane + oi * ow + oj] = best_idx;
                    }
                }
            }
        }
        if train {
            self.argmax = Some((arg, [b, c, h, w], [b, c, oh, ow]));
        }
        Ok(y)
    }

    pub fn backward<T: Elem>(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (arg, in_shape, out_shape) = self
            .argmax
            .take()
            .ok_or_else(|| Error::Input("maxpool backward without cached forward".into()))?;
        debug_assert_eq!(dy.shape(), out_shape);
        let mut dx = Tensor4::<T>::zeros((in_shape[0], in_shape[1], in_shape[2], in_shape[3]));
        let dxs = dx.as_slice_mut().unwrap();
        for (d, &src) in dy.iter().zip(arg.iter()) {
            dxs[src] += *d;
        }
        Ok(dx)
    }
}

/// Average pooling without padding (used by dense-net transitions).
#[derive(Debug, Clone)]
pub struct AvgPool2d {
    pub kernel: usize,
    pub stride: usize,
    in_shape: Option<[usize; 4]>,
}

impl AvgPool2d {
    pub fn new(kernel: usize, stride: usize) -> Self {
        AvgPool2d {
            kernel,
            stride,
            in_shape: None,
        }
    }

    pub fn forward<T: Elem>(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        let (b, c, h, w) = dims4(x);
        if h < self.kernel || w < self.kernel {
            return Err(Error::Input(format!(
                "avgpool input {h}x{w} too small for kernel {}",
                self.kernel
            )));
        }
        let oh = (h - self.kernel) / self.stride + 1;
        let ow = (w - self.kernel) / self.stride + 1;
        let inv = T::from_f64(1.0 / (self.kernel * self.kernel) as f64);
        let mut y = Tensor4::<T>::zeros((b, c, oh, ow));
        for bi in 0..b {
            for ci in 0..c {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut s = T::zero();
                        for ki in 0..self.kernel {
                            for kj in 0..self.kernel {
                                s += x[(bi, ci, oi * self.stride + ki, oj * self.stride + kj)];
                            }
                        }
                        y[(bi, ci, oi, oj)] = s * inv;
                    }
                }
            }
        }
        if train {
            self.in_shape = Some([b, c, h, w]);
        }
        Ok(y)
    }

    pub fn backward<T: Elem>(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let [b, c, h, w] = self
            .in_shape
            .take()
            .ok_or_else(|| Error::Input("avgpool backward without cached forward".into()))?;
        let (_, _, oh, ow) = dims4(dy);
        let inv = T::from_f64(1.0 / (self.kernel * self.kernel) as f64);
        let mut dx = Tensor4::<T>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let g = dy[(bi, ci, oi, oj)] * inv;
                        for ki in 0..self.kernel {
                            for kj in 0..self.kernel {
                                dx[(bi, ci, oi * self.stride + ki, oj * self.stride + kj)] += g;
                            }
                        }
                    }
                }
            }
        }
        Ok(dx)
    }
}

/// Collapses `(B,C,H,W)` to `(B,C)` by spatial mean.
pub fn global_avg_pool<T: Elem>(x: &Tensor4<T>) -> Tensor2<T> {
    let (b, c, h, w) = dims4(x);
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let mut y = Tensor2::<T>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let plane = x.index_axis(ndarray::Axis(0), bi);
            y[(bi, ci)] = plane.index_axis(ndarray::Axis(0), ci).sum() * inv;
        }
    }
    y
}

/// Backward of [`global_avg_pool`]: spreads each gradient uniformly.
pub fn global_avg_pool_backward<T: Elem>(
    dy: &Tensor2<T>,
    h: usize,
    w: usize,
) -> Tensor4<T> {
    let (b, c) = dy.dim();
    let inv = T::from_f64(1.0 / (h * w) as f64);
    Tensor4::from_shape_fn((b, c, h, w), |(bi, ci, _, _)| dy[(bi, ci)] * inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_routes_gradient_to_first_maximum() {
        let mut pool = MaxPool2d::new(2, 2, 0);
        // Tie between (0,0) and (0,1); scan order picks (0,0).
        let x = Tensor4::from_shape_vec((1, 1, 2, 2), vec![5.0, 5.0, 1.0, 2.0]).unwrap();
        let y = pool.forward(&x, true).unwrap();
        assert_eq!(y[(0, 0, 0, 0)], 5.0);
        let dy = Tensor4::from_elem((1, 1, 1, 1), 1.0);
        let dx = pool.backward(&dy).unwrap();
        assert_eq!(
            dx.iter().copied().collect::<Vec<_>>(),
            vec![1.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn stem_pool_halves_resolution() {
        let mut pool = MaxPool2d::new(3, 2, 1);
        let x = Tensor4::<f32>::zeros((1, 4, 112, 112));
        let y = pool.forward(&x, false).unwrap();
        assert_eq!(y.dim(), (1, 4, 56, 56));
    }

    #[test]
    fn global_pool_round_trip() {
        let x = Tensor4::from_shape_fn((2, 3, 4, 4), |(b, c, i, j)| {
            (b + c + i + j) as f64
        });
        let y = global_avg_pool(&x);
        assert_eq!(y.dim(), (2, 3));
        // mean of (i+j) over 4x4 grid is 3.0
        assert!((y[(0, 0)] - 3.0).abs() < 1e-12);
        let dy = Tensor2::from_elem((2, 3), 16.0);
        let dx = global_avg_pool_backward(&dy, 4, 4);
        assert_eq!(dx[(1, 2, 3, 3)], 1.0);
    }

    #[test]
    fn avgpool_halves_and_spreads() {
        let mut pool = AvgPool2d::new(2, 2);
        let x = Tensor4::from_shape_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pool.forward(&x, true).unwrap();
        assert_eq!(y[(0, 0, 0, 0)], 2.5);
        let dy = Tensor4::from_elem((1, 1, 1, 1), 4.0);
        let dx = pool.backward(&dy).unwrap();
        assert!(dx.iter().all(|&v| v == 1.0));
    }
}
