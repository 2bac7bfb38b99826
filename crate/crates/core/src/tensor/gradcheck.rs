use super::{Graph, Tensor, TensorError, Var};
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference half step, within `[1e-7, 1e-4]`.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor: gradients smaller than this are compared absolutely.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-6, tol: 1e-4, abs_floor: 1e-4 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InputReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }
}

fn evaluate<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<(Graph<T>, Vec<Var>, Var)>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok((g, vars, out))
}

/// Compares autodiff gradients of the scalar `f` against central differences
/// `(f(x+eps) − f(x−eps)) / 2eps`, element by element, for every input.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&cfg.eps) {
        return Err(TensorError::ProbeStep(cfg.eps).into());
    }
    let (mut g, vars, out) = evaluate(&f, inputs)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match g.grad(v) {
            Some(gr) => gr.iter().map(|x| x.to_f64_lossless()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let eps = T::lit(cfg.eps);
    let mut probe = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (input, grads) in analytic.iter().enumerate() {
        let mut report = InputReport::default();
        for index in 0..probe[input].numel() {
            let orig = probe[input].data()[index];
            let mut value_at = |x: T| -> Result<f64> {
                probe[input].data_mut()[index] = x;
                let (g, _, out) = evaluate(&f, &probe)?;
                let v = g.value(out).item().map(|v| v.to_f64_lossless()).unwrap_or(f64::NAN);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(TensorError::Probe { input, index }.into())
                }
            };
            let plus = value_at(orig + eps)?;
            let minus = value_at(orig - eps)?;
            probe[input].data_mut()[index] = orig;
            // the realised step can differ from eps after rounding
            let step = (orig + eps).to_f64_lossless() - (orig - eps).to_f64_lossless();
            let numeric = (plus - minus) / step;
            let a = grads[index];
            let abs = (a - numeric).abs();
            let rel = if abs == 0.0 { 0.0 } else { abs / a.abs().max(numeric.abs()).max(cfg.abs_floor) };
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst_index.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst_index = Some(index);
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport { inputs: reports, tol: cfg.tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_sum_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let r = grad_check(
            |g, v| {
                let p = g.matmul(v[0], v[1])?;
                Ok(g.sum(p, None)?)
            },
            &[a, b],
            &GradCheckConfig { eps: 1e-6, tol: 1e-6, abs_floor: 1e-4 },
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn relu_of_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // keep pre-activations away from the kink
        let w = random(&mut rng, &[4, 3]);
        let x = random(&mut rng, &[3, 1]);
        let mut g = Graph::new();
        let (wv, xv) = (g.constant(w.clone()), g.constant(x.clone()));
        let pre = g.matmul(wv, xv).unwrap();
        assert!(g.value(pre).data().iter().all(|v| v.abs() > 1e-3));
        let r = grad_check(
            |g, v| {
                let p = g.matmul(v[0], v[1])?;
                let h = g.relu(p);
                Ok(g.sum(h, None)?)
            },
            &[w, x],
            &GradCheckConfig { eps: 1e-6, tol: 1e-5, abs_floor: 1e-4 },
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::vector(vec![1.0f64, -2.0]);
        let r = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(r.inputs[0].max_abs_error, 0.0);
        assert_eq!(r.max_rel_error(), 0.0);
    }

    #[test]
    fn rejects_out_of_range_step_and_non_finite_probe() {
        let x = Tensor::vector(vec![1.0f64]);
        let err = grad_check(|g, v| Ok(g.sum(v[0], None)?), &[x.clone()], &GradCheckConfig {
            eps: 1e-2,
            ..Default::default()
        })
        .unwrap_err();
        assert!(matches!(err, Error::Tensor(TensorError::ProbeStep(_))));

        // exp overflows at every probe point
        let z = Tensor::vector(vec![1e-7f64]);
        let err = grad_check(
            |g, v| {
                let e = g.scale(v[0], 1e300);
                let big = g.exp(e);
                Ok(g.sum(big, None)?)
            },
            &[z],
            &GradCheckConfig { eps: 1e-5, ..Default::default() },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Tensor(TensorError::Probe { input: 0, index: 0 })));
    }
}
