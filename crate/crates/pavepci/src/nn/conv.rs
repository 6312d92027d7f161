//! 2D convolution via im2col + GEMM.

use ndarray::parallel::prelude::*;
use ndarray::{Array2, ArrayView2, ArrayView3, ArrayViewMut3, Axis};

use super::Param;
use crate::error::{Error, Result};
use crate::tensor::{dims4, Elem, Tensor4};

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `(out, in, k, k)`
    pub weight: Param<T>,
    /// `(out,)`; zero-initialized when present.
    pub bias: Option<Param<T>>,
    cache: Option<Tensor4<T>>,
}

impl<T: Elem> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        seed: u64,
        name: &str,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::kaiming_uniform(
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
            seed,
            &format!("{name}.weight"),
        );
        let bias = with_bias.then(|| Param::zeros(&[out_channels]));
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if h + 2 * p < k || w + 2 * p < k {
            return Err(Error::Input(format!(
                "conv input {h}x{w} too small for kernel {k} with padding {p}"
            )));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }

    fn weight2(&self) -> ArrayView2<'_, T> {
        let ikk = self.in_channels * self.kernel * self.kernel;
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, ikk))
            .unwrap()
    }

    pub fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        let (b, c, h, w) = dims4(x);
        if c != self.in_channels {
            return Err(Error::Input(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (oh, ow) = self.output_hw(h, w)?;
        let w2 = self.weight2();
        let bias = self.bias.as_ref().map(|p| p.value.view());
        let mut y = Tensor4::<T>::zeros((b, self.out_channels, oh, ow));
        let fast_1x1 = self.kernel == 1 && self.stride == 1 && self.padding == 0;

        y.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(yb, xb)| {
                let mut y2 = yb
                    .into_shape_with_order((self.out_channels, oh * ow))
                    .unwrap();
                if fast_1x1 {
                    let x2 = xb.into_shape_with_order((c, h * w)).unwrap();
                    y2.assign(&w2.dot(&x2));
                } else {
                    let col = im2col(&xb, self.kernel, self.stride, self.padding, oh, ow);
                    y2.assign(&w2.dot(&col));
                }
                if let Some(bv) = &bias {
                    for (mut row, bval) in y2.outer_iter_mut().zip(bv.iter()) {
                        row.mapv_inplace(|v| v + *bval);
                    }
                }
            });

        if train {
            self.cache = Some(x.clone());
        }
        Ok(y)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::Input("conv backward without cached forward".into()))?;
        let (b, c, h, w) = dims4(&x);
        let (_, o, oh, ow) = dims4(dy);
        let w2 = self.weight2().to_owned();
        let fast_1x1 = self.kernel == 1 && self.stride == 1 && self.padding == 0;

        let mut dx = Tensor4::<T>::zeros(x.raw_dim());
        let chunk = b.div_ceil(rayon::current_num_threads().max(1)).max(1);
        let xchunks: Vec<_> = x.axis_chunks_iter(Axis(0), chunk).collect();
        let dychunks: Vec<_> = dy.axis_chunks_iter(Axis(0), chunk).collect();
        let dxchunks: Vec<_> = dx.axis_chunks_iter_mut(Axis(0), chunk).collect();

        // Per-chunk partial weight gradients are reduced in chunk order so
        // the result does not depend on scheduling.
        let partials: Vec<Array2<T>> = xchunks
            .into_par_iter()
            .zip(dychunks.into_par_iter())
            .zip(dxchunks.into_par_iter())
            .map(|((xc, dyc), mut dxc)| {
                let mut dw2 = Array2::<T>::zeros((o, c * self.kernel * self.kernel));
                for i in 0..xc.shape()[0] {
                    let xb = xc.index_axis(Axis(0), i);
                    let dy2 = dyc
                        .index_axis(Axis(0), i)
                        .into_shape_with_order((o, oh * ow))
                        .unwrap();
                    let mut dxb = dxc.index_axis_mut(Axis(0), i);
                    if fast_1x1 {
                        let x2 = xb.into_shape_with_order((c, h * w)).unwrap();
                        dw2 = dw2 + dy2.dot(&x2.t());
                        let mut dx2 = dxb
                            .view_mut()
                            .into_shape_with_order((c, h * w))
                            .unwrap();
                        dx2 += &w2.t().dot(&dy2);
                    } else {
                        let col = im2col(&xb, self.kernel, self.stride, self.padding, oh, ow);
                        dw2 = dw2 + dy2.dot(&col.t());
                        let dcol = w2.t().dot(&dy2);
                        col2im_add(
                            &dcol,
                            &mut dxb,
                            self.kernel,
                            self.stride,
                            self.padding,
                            oh,
                            ow,
                        );
                    }
                }
                dw2
            })
            .collect();

        let mut dwg = self
            .weight
            .grad
            .view_mut()
            .into_shape_with_order((o, c * self.kernel * self.kernel))
            .unwrap();
        for p in partials {
            dwg += &p;
        }
        if let Some(bias) = &mut self.bias {
            let db = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
            let mut bg = bias
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            bg += &db;
        }
        Ok(dx)
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

/// Unfolds `(C,H,W)` into `(C*k*k, oh*ow)` with zero padding.
pub fn im2col<T: Elem>(
    x: &ArrayView3<'_, T>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut col = Array2::<T>::zeros((c * k * k, oh * ow));
    let xs = x.as_slice().expect("contiguous feature map");
    let cs = col.as_slice_mut().expect("contiguous col buffer");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * oh * ow;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let xrow = (ci * h + ii as usize) * w;
                    let orow = base + oi * ow;
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            cs[orow + oj] = xs[xrow + jj as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Folds `(C*k*k, oh*ow)` gradients back onto `(C,H,W)`, accumulating.
pub fn col2im_add<T: Elem>(
    dcol: &Array2<T>,
    dx: &mut ArrayViewMut3<'_, T>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (c, h, w) = (dx.shape()[0], dx.shape()[1], dx.shape()[2]);
    let ds = dcol.as_slice().expect("contiguous col gradient");
    let xs = dx.as_slice_mut().expect("contiguous input gradient");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let base = row * oh * ow;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let xrow = (ci * h + ii as usize) * w;
                    let orow = base + oi * ow;
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            xs[xrow + jj as usize] += ds[orow + oj];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut conv = Conv2d::<f64>::new(1, 1, 1, 1, 0, false, 0, "c");
        conv.weight.value.fill(1.0);
        let x = Tensor4::from_shape_fn((1, 1, 3, 3), |(_, _, i, j)| (i * 3 + j) as f64);
        let y = conv.forward(&x, false).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn known_3x3_convolution() {
        // 3x3 averaging kernel over a 3x3 input of ones, zero padding.
        let mut conv = Conv2d::<f64>::new(1, 1, 3, 1, 1, false, 0, "c");
        conv.weight.value.fill(1.0);
        let x = Tensor4::from_elem((1, 1, 3, 3), 1.0);
        let y = conv.forward(&x, false).unwrap();
        let want = array![[4.0, 6.0, 4.0], [6.0, 9.0, 6.0], [4.0, 6.0, 4.0]];
        assert_eq!(y.index_axis(Axis(0), 0).index_axis(Axis(0), 0), want);
    }

    #[test]
    fn stride_two_halves_spatial_dims() {
        let mut conv = Conv2d::<f32>::new(3, 8, 3, 2, 1, false, 0, "c");
        let x = Tensor4::zeros((2, 3, 8, 8));
        let y = conv.forward(&x, false).unwrap();
        assert_eq!(y.dim(), (2, 8, 4, 4));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut conv = Conv2d::<f32>::new(4, 8, 3, 1, 1, false, 0, "c");
        let x = Tensor4::zeros((1, 3, 8, 8));
        assert!(conv.forward(&x, false).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        use rand::Rng;
        let mut rng = crate::seeds::rng_for(11, "conv-fd");
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, true, 5, "c");
        let x = Tensor4::from_shape_fn((2, 2, 5, 5), |_| rng.random_range(-1.0..1.0));

        let y = conv.forward(&x, true).unwrap();
        let dy = Tensor4::from_elem(y.raw_dim(), 1.0);
        let dx = conv.backward(&dy).unwrap();

        let eps = 1e-6;
        let mut worst = 0.0f64;
        for idx in [(0, 0, 0, 0), (1, 1, 2, 3), (0, 1, 4, 4), (1, 0, 2, 2)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fp = conv.forward(&xp, false).unwrap().sum();
            let fm = conv.forward(&xm, false).unwrap().sum();
            let num = (fp - fm) / (2.0 * eps);
            worst = worst.max((num - dx[idx]).abs());
        }
        assert!(worst < 1e-6, "input gradient error {worst}");

        // one weight coordinate
        let widx = [1, 0, 1, 2];
        let orig = conv.weight.value[ndarray::IxDyn(&widx)];
        conv.weight.value[ndarray::IxDyn(&widx)] = orig + eps;
        let fp = conv.forward(&x, false).unwrap().sum();
        conv.weight.value[ndarray::IxDyn(&widx)] = orig - eps;
        let fm = conv.forward(&x, false).unwrap().sum();
        conv.weight.value[ndarray::IxDyn(&widx)] = orig;
        let num = (fp - fm) / (2.0 * eps);
        let ana = conv.weight.grad[ndarray::IxDyn(&widx)];
        assert!((num - ana).abs() < 1e-6, "weight gradient {ana} vs {num}");
    }
}
