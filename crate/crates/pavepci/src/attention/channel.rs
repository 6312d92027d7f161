//! Channel attention: what to look at.

use ndarray::{Array2, Axis};

use super::mlp_hidden_width;
use crate::error::{Error, Result};
use crate::nn::{join_path, Param, ParamVisitor, ParamVisitorMut};
use crate::tensor::{dims4, Elem, Tensor2, Tensor4};

/// Produces a `(B,C,1,1)` map: `sigmoid(MLP(avgpool(F)) + MLP(maxpool(F)))`
/// with one shared bias-free MLP (`C -> hidden -> C`, ReLU after the hidden
/// layer).
#[derive(Debug, Clone)]
pub struct ChannelAttention<T> {
    pub channels: usize,
    pub reduction_ratio: usize,
    pub hidden: usize,
    /// `(hidden, C)`, no bias.
    pub fc1: Param<T>,
    /// `(C, hidden)`, no bias.
    pub fc2: Param<T>,
    cache: Option<Cache<T>>,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    s_avg: Tensor2<T>,
    s_max: Tensor2<T>,
    h_avg: Tensor2<T>,
    h_max: Tensor2<T>,
    map: Tensor2<T>,
    argmax: Vec<usize>,
    hw: (usize, usize),
}

impl<T: Elem> ChannelAttention<T> {
    pub fn new(channels: usize, reduction_ratio: usize, seed: u64, name: &str) -> Result<Self> {
        if channels == 0 || reduction_ratio == 0 {
            return Err(Error::Config(
                "channel attention needs positive channels and reduction ratio".into(),
            ));
        }
        let hidden = mlp_hidden_width(channels, reduction_ratio);
        Ok(ChannelAttention {
            channels,
            reduction_ratio,
            hidden,
            fc1: Param::kaiming_uniform(
                &[hidden, channels],
                channels,
                seed,
                &format!("{name}.fc1.weight"),
            ),
            fc2: Param::kaiming_uniform(
                &[channels, hidden],
                hidden,
                seed,
                &format!("{name}.fc2.weight"),
            ),
            cache: None,
        })
    }

    fn fc1v(&self) -> ndarray::ArrayView2<'_, T> {
        self.fc1.value.view().into_dimensionality().unwrap()
    }

    fn fc2v(&self) -> ndarray::ArrayView2<'_, T> {
        self.fc2.value.view().into_dimensionality().unwrap()
    }

    /// Returns the `(B,C,1,1)` attention map.
    pub fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        let (b, c, h, w) = dims4(x);
        if c != self.channels {
            return Err(Error::Config(format!(
                "channel attention configured for {} channels, input has {c}",
                self.channels
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::Input("empty spatial extent".into()));
        }

        let inv = T::from_f64(1.0 / (h * w) as f64);
        let mut s_avg = Tensor2::<T>::zeros((b, c));
        let mut s_max = Tensor2::<T>::zeros((b, c));
        let mut argmax = vec![0usize; b * c];
        for bi in 0..b {
            for ci in 0..c {
                let plane = x.index_axis(Axis(0), bi);
                let plane = plane.index_axis(Axis(0), ci);
                let mut sum = T::zero();
                let mut best = T::neg_infinity();
                let mut best_i = 0usize;
                if let Some(ps) = plane.as_slice() {
                    for (i, &v) in ps.iter().enumerate() {
                        sum += v;
                        if v > best {
                            best = v;
                            best_i = i;
                        }
                    }
                } else {
                    for ((i, j), &v) in plane.indexed_iter() {
                        sum += v;
                        if v > best {
                            best = v;
                            best_i = i * w + j;
                        }
                    }
                }
                s_avg[(bi, ci)] = sum * inv;
                s_max[(bi, ci)] = best;
                argmax[bi * c + ci] = best_i;
            }
        }

        let relu = |m: Array2<T>| m.mapv(|v| if v > T::zero() { v } else { T::zero() });
        let h_avg = relu(s_avg.dot(&self.fc1v().t()));
        let h_max = relu(s_max.dot(&self.fc1v().t()));
        let a = h_avg.dot(&self.fc2v().t()) + h_max.dot(&self.fc2v().t());
        let map: Tensor2<T> = a.mapv(crate::nn::sigmoid_scalar);

        // dot() can hand back an F-order array for degenerate shapes, so
        // build the output without assuming the map's memory layout.
        let out = Tensor4::from_shape_fn((b, c, 1, 1), |(bi, ci, _, _)| map[(bi, ci)]);
        if train {
            self.cache = Some(Cache {
                s_avg,
                s_max,
                h_avg,
                h_max,
                map,
                argmax,
                hw: (h, w),
            });
        }
        Ok(out)
    }

    /// Gradient of a loss wrt the input, given the gradient wrt the map.
    pub fn backward(&mut self, dmap: &Tensor4<T>) -> Result<Tensor4<T>> {
        let Cache {
            s_avg,
            s_max,
            h_avg,
            h_max,
            map,
            argmax,
            hw: (h, w),
        } = self
            .cache
            .take()
            .ok_or_else(|| Error::Input("channel attention backward without forward".into()))?;
        let (b, c) = map.dim();
        let dm2 = Tensor2::from_shape_fn((b, c), |(bi, ci)| dmap[(bi, ci, 0, 0)]);

        // dz through the sigmoid on z = a_avg + a_max
        let mut dz = Tensor2::<T>::zeros((b, c));
        ndarray::Zip::from(&mut dz)
            .and(&dm2)
            .and(&map)
            .for_each(|o, &d, &m| *o = d * m * (T::one() - m));

        let mut dx = Tensor4::<T>::zeros((b, self.channels, h, w));
        let inv = T::from_f64(1.0 / (h * w) as f64);

        let mut fc1g = Array2::<T>::zeros((self.hidden, self.channels));
        let mut fc2g = Array2::<T>::zeros((self.channels, self.hidden));
        for (hpost, spooled, is_avg) in [(&h_avg, &s_avg, true), (&h_max, &s_max, false)] {
            // da = dz for each path; dh = (da . fc2) masked by relu'
            let mut dh = dz.dot(&self.fc2v());
            ndarray::Zip::from(&mut dh).and(hpost).for_each(|o, &hv| {
                if hv <= T::zero() {
                    *o = T::zero();
                }
            });
            fc2g = fc2g + dz.t().dot(hpost);
            fc1g = fc1g + dh.t().dot(spooled);
            let ds = dh.dot(&self.fc1v());

            for bi in 0..b {
                for ci in 0..c {
                    let g = ds[(bi, ci)];
                    let mut plane = dx.index_axis_mut(Axis(0), bi);
                    let mut plane = plane.index_axis_mut(Axis(0), ci);
                    let psl = plane.as_slice_mut().unwrap();
                    if is_avg {
                        let spread = g * inv;
                        for v in psl.iter_mut() {
                            *v += spread;
                        }
                    } else {
                        psl[argmax[bi * c + ci]] += g;
                    }
                }
            }
        }
        let mut g1 = self
            .fc1
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        g1 += &fc1g;
        let mut g2 = self
            .fc2
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        g2 += &fc2g;
        Ok(dx)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.len() + self.fc2.len()
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        f(&join_path(prefix, "fc1.weight"), &mut self.fc1);
        f(&join_path(prefix, "fc2.weight"), &mut self.fc2);
    }

    pub fn visit_ref(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join_path(prefix, "fc1.weight"), &self.fc1);
        f(&join_path(prefix, "fc2.weight"), &self.fc2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::DEFAULT_REDUCTION_RATIO;

    #[test]
    fn zero_input_gives_exactly_half() {
        let mut ca = ChannelAttention::<f64>::new(4, DEFAULT_REDUCTION_RATIO, 7, "ca").unwrap();
        let x = Tensor4::zeros((1, 4, 5, 5));
        let m = ca.forward(&x, false).unwrap();
        assert_eq!(m.dim(), (1, 4, 1, 1));
        assert!(m.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn invariant_under_spatial_permutation() {
        use rand::Rng;
        let mut rng = crate::seeds::rng_for(9, "ca-perm");
        let mut ca = ChannelAttention::<f64>::new(3, 16, 2, "ca").unwrap();
        let x = Tensor4::from_shape_fn((2, 3, 4, 4), |_| rng.random_range(-1.0..1.0));
        // Reverse both spatial axes: a permutation of each plane.
        let mut xp = x.clone();
        xp.invert_axis(Axis(2));
        xp.invert_axis(Axis(3));
        let m1 = ca.forward(&x, false).unwrap();
        let m2 = ca.forward(&xp, false).unwrap();
        for (a, b) in m1.iter().zip(m2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_scalar_recomputation_on_tiny_input() {
        // (1,2,2,2), r=16 -> hidden width 1; hand-set weights.
        let mut ca = ChannelAttention::<f64>::new(2, 16, 0, "ca").unwrap();
        ca.fc1.value = ndarray::arr2(&[[0.3, -0.2]]).into_dyn();
        ca.fc2.value = ndarray::arr2(&[[0.5], [-1.0]]).into_dyn();
        let x = Tensor4::from_shape_vec(
            (1, 2, 2, 2),
            vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, -0.5],
        )
        .unwrap();
        let m = ca.forward(&x, false).unwrap();

        // Scalar oracle: pool -> MLP -> sum -> sigmoid, evaluated by hand.
        let avg = [(1.0 + 2.0 + 3.0 + 4.0) / 4.0, (-1.0 + 0.5 + 2.0 - 0.5) / 4.0];
        let mx = [4.0, 2.0];
        let hid = |s: &[f64; 2]| (0.3 * s[0] - 0.2 * s[1]).max(0.0);
        let out = |h: f64| [0.5 * h, -1.0 * h];
        let (ha, hm) = (hid(&avg), hid(&mx));
        let (oa, om) = (out(ha), out(hm));
        for c in 0..2 {
            let want = 1.0 / (1.0 + (-(oa[c] + om[c])).exp());
            assert!(
                (m[(0, c, 0, 0)] - want).abs() < 1e-14,
                "channel {c}: {} vs {want}",
                m[(0, c, 0, 0)]
            );
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_empty_extent() {
        let mut ca = ChannelAttention::<f64>::new(4, 16, 0, "ca").unwrap();
        assert!(matches!(
            ca.forward(&Tensor4::zeros((1, 3, 2, 2)), false),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ca.forward(&Tensor4::zeros((1, 4, 0, 2)), false),
            Err(Error::Input(_))
        ));
    }
}
