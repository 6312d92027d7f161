//! Central finite-difference verification of analytic gradients.
//!
//! The loss under test is `sum(op(x))`. Analytic input and parameter
//! gradients from one forward/backward pass are compared coordinate by
//! coordinate against `(f(t+h) - f(t-h)) / 2h` with `h = 1e-5`. Run this in
//! `f64`; single precision drowns the differences in rounding noise.

use crate::error::{Error, Result};
use crate::nn::ParamVisitorMut;
use crate::tensor::{Elem, Tensor4};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// An operation whose gradients can be checked.
pub trait Differentiable<T: Elem> {
    fn forward_op(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>>;
    fn backward_op(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>>;
    /// Visit learnable parameters; ops without parameters do nothing.
    fn visit_op(&mut self, f: &mut ParamVisitorMut<'_, T>);
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: String,
    pub coordinates_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < 1e-10 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

fn loss<T: Elem>(op: &mut impl Differentiable<T>, x: &Tensor4<T>) -> Result<f64> {
    Ok(op.forward_op(x, false)?.sum().as_f64())
}

/// Checks analytic gradients of `sum(op(x))` against central differences.
///
/// Fails hard (does not return a report) if any analytic gradient is
/// non-finite, naming the offending coordinate.
pub fn gradient_check<T: Elem>(
    op: &mut impl Differentiable<T>,
    input: &Tensor4<T>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    op.visit_op(&mut |_, p| p.zero_grad());
    let y = op.forward_op(input, true)?;
    let dy = Tensor4::from_elem(y.raw_dim(), T::one());
    let dx = op.backward_op(&dy)?;

    for (i, g) in dx.iter().enumerate() {
        if !g.as_f64().is_finite() {
            return Err(Error::Input(format!(
                "non-finite analytic gradient at input coordinate {i}"
            )));
        }
    }
    let mut param_grads: Vec<(String, Vec<f64>)> = Vec::new();
    op.visit_op(&mut |name, p| {
        param_grads.push((
            name.to_string(),
            p.grad.iter().map(|g| g.as_f64()).collect(),
        ));
    });
    for (name, grads) in &param_grads {
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite analytic gradient at parameter {name}[{i}]"
            )));
        }
    }

    let h = T::from_f64(FD_STEP);
    let mut max_rel = 0.0f64;
    let mut worst = String::from("none");
    let mut checked = 0usize;

    let mut x = input.clone();
    let n = x.len();
    for i in 0..n {
        let orig = x.as_slice().unwrap()[i];
        x.as_slice_mut().unwrap()[i] = orig + h;
        let fp = loss(op, &x)?;
        x.as_slice_mut().unwrap()[i] = orig - h;
        let fm = loss(op, &x)?;
        x.as_slice_mut().unwrap()[i] = orig;
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let analytic = dx.as_slice().unwrap()[i].as_f64();
        let e = rel_err(analytic, numeric);
        checked += 1;
        if e > max_rel {
            max_rel = e;
            worst = format!("input[{i}]");
        }
    }

    for (name, grads) in &param_grads {
        for i in 0..grads.len() {
            nudge(op, name, i, h);
            let fp = loss(op, input)?;
            nudge(op, name, i, -(h + h));
            let fm = loss(op, input)?;
            nudge(op, name, i, h);
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let e = rel_err(grads[i], numeric);
            checked += 1;
            if e > max_rel {
                max_rel = e;
                worst = format!("{name}[{i}]");
            }
        }
    }

    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst_coordinate: worst,
        coordinates_checked: checked,
        tolerance,
    })
}

fn nudge<T: Elem>(op: &mut impl Differentiable<T>, name: &str, idx: usize, delta: T) {
    op.visit_op(&mut |n, p| {
        if n == name {
            p.value.as_slice_mut().unwrap()[idx] += delta;
        }
    });
}

/// Pass-through op; its gradient check is exact up to summation rounding.
#[derive(Debug, Default)]
pub struct IdentityOp;

impl<T: Elem> Differentiable<T> for IdentityOp {
    fn forward_op(&mut self, x: &Tensor4<T>, _train: bool) -> Result<Tensor4<T>> {
        Ok(x.clone())
    }
    fn backward_op(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(dy.clone())
    }
    fn visit_op(&mut self, _f: &mut ParamVisitorMut<'_, T>) {}
}

impl<T: Elem> Differentiable<T> for crate::attention::ChannelAttention<T> {
    fn forward_op(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        self.forward(x, train)
    }
    fn backward_op(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.backward(dy)
    }
    fn visit_op(&mut self, f: &mut ParamVisitorMut<'_, T>) {
        self.visit("", f);
    }
}

impl<T: Elem> Differentiable<T> for crate::attention::SpatialAttention<T> {
    fn forward_op(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        self.forward(x, train)
    }
    fn backward_op(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.backward(dy)
    }
    fn visit_op(&mut self, f: &mut ParamVisitorMut<'_, T>) {
        self.visit("", f);
    }
}

impl<T: Elem> Differentiable<T> for crate::attention::Cbam<T> {
    fn forward_op(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        self.forward(x, train)
    }
    fn backward_op(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.backward(dy)
    }
    fn visit_op(&mut self, f: &mut ParamVisitorMut<'_, T>) {
        self.visit("", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{Cbam, ChannelAttention, SpatialAttention};
    use rand::Rng;

    fn random_input(shape: (usize, usize, usize, usize), seed: u64) -> Tensor4<f64> {
        let mut rng = crate::seeds::rng_for(seed, "gradcheck-input");
        Tensor4::from_shape_fn(shape, |_| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn identity_op_is_exact() {
        let mut op = IdentityOp;
        let x = random_input((1, 2, 3, 3), 0);
        let report = gradient_check(&mut op, &x, 1e-4).unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn channel_attention_passes() {
        let mut op = ChannelAttention::<f64>::new(4, 16, 21, "ca").unwrap();
        let x = random_input((1, 4, 3, 3), 1);
        let report = gradient_check(&mut op, &x, 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn spatial_attention_passes() {
        let mut op = SpatialAttention::<f64>::new(7, 22, "sa").unwrap();
        let x = random_input((1, 4, 5, 5), 2);
        let report = gradient_check(&mut op, &x, 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn cbam_passes() {
        let mut op = Cbam::<f64>::new(4, 16, 7, 23, "cbam").unwrap();
        let x = random_input((2, 4, 4, 4), 3);
        let report = gradient_check(&mut op, &x, 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
