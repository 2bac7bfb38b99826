//! Adam with exponential learning-rate decay, plus the post-step max-norm projection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub step: u64,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    /// One buffer per parameter, in module traversal order.
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(T::lit(0.9), T::lit(0.999), T::lit(1e-8))
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new(beta1: T, beta2: T, epsilon: T) -> Self {
        Self { step: 0, beta1, beta2, epsilon, m: Vec::new(), v: Vec::new() }
    }

    /// Allocates moment buffers on first use, advances the step counter and
    /// returns the bias corrections `(1 − β₁ᵗ, 1 − β₂ᵗ)`.
    fn begin_step(&mut self, sizes: &[usize]) -> Result<(T, T)> {
        if self.m.is_empty() {
            self.m = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != sizes.len() || self.m.iter().zip(sizes).any(|(m, &n)| m.len() != n) {
            return Err(Error::Dimension("optimizer state does not match the parameters".into()));
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = T::one() - T::lit(self.beta1.to_f64_lossless().powf(t));
        let c2 = T::one() - T::lit(self.beta2.to_f64_lossless().powf(t));
        Ok((c1, c2))
    }

    /// A missing gradient counts as zero.
    fn update(&mut self, k: usize, p: &mut [T], g: Option<&[T]>, lr: T, (c1, c2): (T, T)) {
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let (m, v) = (&mut self.m[k], &mut self.v[k]);
        let step = |p: &mut T, m: &mut T, v: &mut T, g: T| {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        match g {
            Some(g) => {
                for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                    step(p, m, v, g);
                }
            }
            None => {
                for ((p, m), v) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    step(p, m, v, T::zero());
                }
            }
        }
    }

    /// One Adam update over parallel parameter/gradient slices.
    ///
    /// `names` is only used for error messages.
    pub fn step_slices(&mut self, params: &mut [&mut [T]], grads: &[&[T]], names: &[String], lr: T) -> Result<()> {
        check_lr(lr)?;
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).map(String::as_str).unwrap_or("?");
            if p.len() != g.len() {
                return Err(Error::Dimension(format!("gradient of {name} has {} entries, expected {}", g.len(), p.len())));
            }
            if let Some(index) = g.iter().position(|x| x.is_nan()) {
                return Err(Error::Numeric { what: format!("NaN gradient in {name}"), index });
            }
        }
        let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        let corr = self.begin_step(&sizes)?;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(k, p, Some(g), lr, corr);
        }
        Ok(())
    }
}

fn check_lr<T: Scalar>(lr: T) -> Result<()> {
    if !(lr > T::zero()) {
        return Err(Error::config("lr", format!("learning rate {lr} must be positive")));
    }
    Ok(())
}

/// Updates every trainable tensor of `model` in place from its stored gradient.
/// Parameters without a gradient are treated as having a zero gradient.
pub fn adam_step<T: Scalar, M: Module<T> + ?Sized>(model: &mut M, state: &mut AdamState<T>, lr: T) -> Result<()> {
    check_lr(lr)?;
    let mut sizes = Vec::new();
    let mut nan: Option<Error> = None;
    model.visit("", &mut |name, t| {
        sizes.push(t.numel());
        if nan.is_none() {
            if let Some(index) = t.grad().and_then(|g| g.iter().position(|x| x.is_nan())) {
                nan = Some(Error::Numeric { what: format!("NaN gradient in {name}"), index });
            }
        }
    });
    if let Some(e) = nan {
        return Err(e);
    }
    let corr = state.begin_step(&sizes)?;
    let mut k = 0;
    model.visit_mut("", &mut |_, t| {
        let (p, g) = t.data_and_grad_mut();
        state.update(k, p, g, lr, corr);
        k += 1;
    });
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay_rate: f64,
    pub decay_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { base_lr: 1e-3, decay_rate: 0.96, decay_steps: 100_000 }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("lr", format!("{} must be positive", self.base_lr)));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::config("decay_rate", format!("{} outside (0, 1]", self.decay_rate)));
        }
        if self.decay_steps == 0 {
            return Err(Error::config("decay_steps", "must be positive"));
        }
        Ok(())
    }

    /// `base_lr · decay_rate^(step / decay_steps)`, without staircasing.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.base_lr * self.decay_rate.powf(step as f64 / self.decay_steps as f64)
    }
}

/// Projects every linear layer's weight columns onto the max-norm ball.
/// Batch-norm parameters and running statistics are left alone.
pub fn apply_constraints<T: Scalar, M: Module<T> + ?Sized>(model: &mut M, max_norm: T) {
    for layer in model.linear_layers_mut() {
        layer.max_norm_project(max_norm);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LinearLayer, Module};
    use crate::tensor::Tensor;

    fn scalar_step(state: &mut AdamState<f64>, w: &mut f64, g: f64, lr: f64) {
        let mut p = [*w];
        state.step_slices(&mut [&mut p[..]], &[&[g][..]], &["w".into()], lr).unwrap();
        *w = p[0];
    }

    #[test]
    fn first_step_is_lr() {
        let mut s = AdamState::default();
        let mut w = 0.0;
        scalar_step(&mut s, &mut w, 1.0, 0.001);
        assert!((w + 0.001).abs() < 1e-9, "{w}");
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut s = AdamState::default();
        let mut w = 1.25;
        for _ in 0..100 {
            scalar_step(&mut s, &mut w, 0.0, 0.001);
        }
        assert_eq!(w, 1.25);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut s = AdamState::default();
        let mut w = 0.0;
        for _ in 0..10_000 {
            let g = 2.0 * (w - 3.0);
            scalar_step(&mut s, &mut w, g, 0.001);
        }
        assert!((w - 3.0).abs() < 1e-3, "{w}");
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut layer = LinearLayer::<f64>::zeros(2, 1);
        layer.bias.accumulate_grad(&[f64::NAN]).unwrap();
        let err = adam_step(&mut layer, &mut AdamState::default(), 1e-3).unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
    }

    #[test]
    fn adam_step_on_module_moves_against_gradient() {
        let mut layer = LinearLayer::<f64>::zeros(1, 1);
        layer.weight.accumulate_grad(&[2.0]).unwrap();
        layer.bias.accumulate_grad(&[-1.0]).unwrap();
        let mut s = AdamState::default();
        adam_step(&mut layer, &mut s, 0.01).unwrap();
        assert!(layer.weight.data()[0] < 0.0 && layer.bias.data()[0] > 0.0);
        assert_eq!(s.m.len(), 2);
        assert!(s.v.iter().flatten().all(|&v| v >= 0.0));
    }

    #[test]
    fn schedule_examples() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 0.001);
        assert!((s.lr_at(100_000) - 0.00096).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for step in (0..1_000_000).step_by(997) {
            let lr = s.lr_at(step);
            assert!(lr > 0.0 && lr <= prev);
            prev = lr;
        }
        assert!(LrSchedule { decay_steps: 0, ..s }.validate().is_err());
    }

    #[test]
    fn constraints_project_and_are_idempotent() {
        let mut layer = LinearLayer::<f64>::zeros(2, 2);
        layer.weight = Tensor::from_rows(&[[0.3, 2.0], [0.4, 0.0]]).unwrap();
        let before = layer.clone();
        apply_constraints(&mut layer, 5.0);
        assert_eq!(layer, before);
        apply_constraints(&mut layer, 1.0);
        assert_eq!(layer.column_norms()[1], 1.0);
        assert_eq!(layer.weight.data()[0], 0.3);
        let once = layer.clone();
        apply_constraints(&mut layer, 1.0);
        assert_eq!(layer, once);
        layer.zero_grad();
    }
}
