//! Sequential composition: channel attention first, then spatial.

use super::{ChannelAttention, SpatialAttention};
use crate::error::Result;
use crate::nn::{join_path, ParamVisitor, ParamVisitorMut};
use crate::tensor::{dims4, Elem, Tensor4};

#[derive(Debug, Clone)]
pub struct Cbam<T> {
    pub channel: ChannelAttention<T>,
    pub spatial: SpatialAttention<T>,
    /// When set, both maps are pinned to 1.0 and the block is an exact
    /// identity in both directions. Used to verify equivalence with the
    /// attention-free baseline.
    pub identity: bool,
    cache: Option<Cache<T>>,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    x: Tensor4<T>,
    mc: Tensor4<T>,
    x_refined: Tensor4<T>,
    ms: Tensor4<T>,
}

/// The two maps captured from one CBAM application.
#[derive(Debug, Clone)]
pub struct CbamMaps<T> {
    /// `(B,C,1,1)`
    pub channel: Tensor4<T>,
    /// `(B,1,H,W)`
    pub spatial: Tensor4<T>,
}

impl<T: Elem> Cbam<T> {
    pub fn new(channels: usize, reduction_ratio: usize, kernel: usize, seed: u64, name: &str) -> Result<Self> {
        Ok(Cbam {
            channel: ChannelAttention::new(
                channels,
                reduction_ratio,
                seed,
                &format!("{name}.ca"),
            )?,
            spatial: SpatialAttention::new(kernel, seed, &format!("{name}.sa"))?,
            identity: false,
            cache: None,
        })
    }

    pub fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        Ok(self.forward_traced(x, train)?.0)
    }

    /// Forward pass that also returns the two attention maps.
    pub fn forward_traced(
        &mut self,
        x: &Tensor4<T>,
        train: bool,
    ) -> Result<(Tensor4<T>, CbamMaps<T>)> {
        let (b, c, h, w) = dims4(x);
        if self.identity {
            let maps = CbamMaps {
                channel: Tensor4::from_elem((b, c, 1, 1), T::one()),
                spatial: Tensor4::from_elem((b, 1, h, w), T::one()),
            };
            return Ok((x.clone(), maps));
        }

        let mc = self.channel.forward(x, train)?;
        let x_refined = x * &mc.broadcast((b, c, h, w)).unwrap();
        let ms = self.spatial.forward(&x_refined, train)?;
        let y = &x_refined * &ms.broadcast((b, c, h, w)).unwrap();
        let maps = CbamMaps {
            channel: mc.clone(),
            spatial: ms.clone(),
        };
        if train {
            self.cache = Some(Cache {
                x: x.clone(),
                mc,
                x_refined,
                ms,
            });
        }
        Ok((y, maps))
    }

    pub fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        if self.identity {
            return Ok(dy.clone());
        }
        let Cache { x, mc, x_refined, ms } = self
            .cache
            .take()
            .ok_or_else(|| crate::error::Error::Input("cbam backward without forward".into()))?;
        let (b, c, h, w) = dims4(&x);

        // y = x_refined * ms
        let mut dms = Tensor4::<T>::zeros((b, 1, h, w));
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let mut s = T::zero();
                    for ci in 0..c {
                        s += dy[(bi, ci, i, j)] * x_refined[(bi, ci, i, j)];
                    }
                    dms[(bi, 0, i, j)] = s;
                }
            }
        }
        let mut dx_refined = dy * &ms.broadcast((b, c, h, w)).unwrap();
        dx_refined += &self.spatial.backward(&dms)?;

        // x_refined = x * mc
        let mut dmc = Tensor4::<T>::zeros((b, c, 1, 1));
        for bi in 0..b {
            for ci in 0..c {
                let mut s = T::zero();
                for i in 0..h {
                    for j in 0..w {
                        s += dx_refined[(bi, ci, i, j)] * x[(bi, ci, i, j)];
                    }
                }
                dmc[(bi, ci, 0, 0)] = s;
            }
        }
        let mut dx = &dx_refined * &mc.broadcast((b, c, h, w)).unwrap();
        dx += &self.channel.backward(&dmc)?;
        Ok(dx)
    }

    pub fn param_count(&self) -> usize {
        self.channel.param_count() + self.spatial.param_count()
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        self.channel.visit(&join_path(prefix, "ca"), f);
        self.spatial.visit(&join_path(prefix, "sa"), f);
    }

    pub fn visit_ref(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.channel.visit_ref(&join_path(prefix, "ca"), f);
        self.spatial.visit_ref(&join_path(prefix, "sa"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::cbam_param_count;

    fn random_cbam(channels: usize, seed: u64) -> Cbam<f64> {
        Cbam::new(channels, 16, 7, seed, "cbam").unwrap()
    }

    #[test]
    fn output_shape_equals_input_shape() {
        let mut cbam = random_cbam(8, 1);
        let x = Tensor4::<f64>::from_shape_fn((2, 8, 4, 4), |(b, c, i, j)| {
            ((b + c + i + j) as f64).sin()
        });
        let y = cbam.forward(&x, false).unwrap();
        assert_eq!(y.dim(), x.dim());
    }

    #[test]
    fn zero_input_maps_to_zero_output() {
        let mut cbam = random_cbam(4, 2);
        let x = Tensor4::<f64>::zeros((1, 4, 6, 6));
        let y = cbam.forward(&x, false).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn equals_manual_composition_of_sub_operations() {
        use rand::Rng;
        let mut rng = crate::seeds::rng_for(77, "cbam-comp");
        let x = Tensor4::from_shape_fn((2, 8, 4, 4), |_| rng.random_range(-2.0..2.0f64));
        let mut cbam = random_cbam(8, 3);
        let y = cbam.forward(&x, false).unwrap();

        // Compose the two ops by hand through clones of the sub-modules.
        let mut ca = cbam.channel.clone();
        let mut sa = cbam.spatial.clone();
        let mc = ca.forward(&x, false).unwrap();
        let x1 = &x * &mc.broadcast((2, 8, 4, 4)).unwrap();
        let ms = sa.forward(&x1, false).unwrap();
        let manual = &x1 * &ms.broadcast((2, 8, 4, 4)).unwrap();
        for (a, b) in y.iter().zip(manual.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_mode_is_exact_passthrough() {
        let mut cbam = random_cbam(4, 9);
        cbam.identity = true;
        let x = Tensor4::from_shape_fn((1, 4, 3, 3), |(_, c, i, j)| (c * 9 + i * 3 + j) as f64);
        let y = cbam.forward(&x, true).unwrap();
        assert_eq!(y, x);
        let dy = Tensor4::from_elem(x.raw_dim(), 2.0);
        assert_eq!(cbam.backward(&dy).unwrap(), dy);
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cbam = random_cbam(256, 0);
        assert_eq!(cbam.param_count(), cbam_param_count(256, 16, 7));
    }
}
