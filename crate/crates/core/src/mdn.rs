//! Mixture density head, mixture likelihood and the Dirichlet prior on the
//! mixing coefficients.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeatureConfig, FeatureExtractor, LinearLayer, Module, Pass};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdnConfig {
    /// Kernel count.
    pub m: usize,
    /// Negative-side scale of the modified ELU.
    pub gamma_elu: f64,
    /// One Dirichlet concentration per kernel.
    pub lambda: Vec<f64>,
    pub alpha_clip: [f64; 2],
    pub sigma_clip: [f64; 2],
}

impl Default for MdnConfig {
    fn default() -> Self {
        Self::with_kernels(5, 2.0)
    }
}

impl MdnConfig {
    pub fn with_kernels(m: usize, lambda: f64) -> Self {
        Self { m, gamma_elu: 1.0, lambda: vec![lambda; m], alpha_clip: [1e-8, 1.0], sigma_clip: [1e-15, 1e15] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::config("m", "need at least one kernel"));
        }
        if self.lambda.len() != self.m {
            return Err(Error::config("lambda", format!("{} values for {} kernels", self.lambda.len(), self.m)));
        }
        if let Some(l) = self.lambda.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
            return Err(Error::config("lambda", format!("{l} is not positive")));
        }
        if !(self.gamma_elu > 0.0 && self.gamma_elu.is_finite()) {
            return Err(Error::config("gamma_elu", format!("{} is not positive", self.gamma_elu)));
        }
        for (name, [lo, hi]) in [("alpha_clip", self.alpha_clip), ("sigma_clip", self.sigma_clip)] {
            if !(lo > 0.0 && lo < hi && hi.is_finite()) {
                return Err(Error::config(name, format!("bounds [{lo}, {hi}] must be positive and ordered")));
            }
        }
        Ok(())
    }
}

/// Mixture parameters as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct MdnParamVars {
    /// `[batch × M]`
    pub alpha: Var,
    /// `[batch × M × d]`
    pub mu: Var,
    /// `[batch × M]`
    pub sigma: Var,
}

/// Mixture parameters as values.
#[derive(Clone, Debug, PartialEq)]
pub struct MdnParams<T> {
    pub alpha: Tensor<T>,
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
}

impl<T: Scalar> MdnParams<T> {
    pub fn new(alpha: Tensor<T>, mu: Tensor<T>, sigma: Tensor<T>) -> Result<Self> {
        let (b, m) = match alpha.shape() {
            [b, m] => (*b, *m),
            s => return Err(Error::Dimension(format!("alpha must be [batch × M], got {s:?}"))),
        };
        if sigma.shape() != [b, m] {
            return Err(Error::Dimension(format!("sigma shape {:?} != alpha shape {:?}", sigma.shape(), [b, m])));
        }
        if mu.rank() != 3 || mu.shape()[..2] != [b, m] {
            return Err(Error::Dimension(format!("mu shape {:?} is not [{b} × {m} × d]", mu.shape())));
        }
        Ok(Self { alpha, mu, sigma })
    }

    pub fn from_vars(graph: &Graph<T>, v: &MdnParamVars) -> Self {
        Self {
            alpha: graph.value(v.alpha).clone().with_requires_grad(false),
            mu: graph.value(v.mu).clone().with_requires_grad(false),
            sigma: graph.value(v.sigma).clone().with_requires_grad(false),
        }
    }

    pub fn batch(&self) -> usize {
        self.alpha.shape()[0]
    }

    pub fn kernels(&self) -> usize {
        self.alpha.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.mu.shape()[2]
    }

    pub fn alpha_row(&self, b: usize) -> &[T] {
        let m = self.kernels();
        &self.alpha.data()[b * m..(b + 1) * m]
    }

    pub fn sigma_row(&self, b: usize) -> &[T] {
        let m = self.kernels();
        &self.sigma.data()[b * m..(b + 1) * m]
    }

    /// Mean of kernel `i` for sample `b`.
    pub fn hypothesis(&self, b: usize, i: usize) -> &[T] {
        let (m, d) = (self.kernels(), self.dim());
        let start = (b * m + i) * d;
        &self.mu.data()[start..start + d]
    }

    /// Registers the values as graph leaves; `trainable` makes them gradient targets.
    pub fn to_vars(&self, graph: &mut Graph<T>, trainable: bool) -> MdnParamVars {
        let mut put = |t: &Tensor<T>| if trainable { graph.param(t.clone()) } else { graph.constant(t.clone()) };
        MdnParamVars { alpha: put(&self.alpha), mu: put(&self.mu), sigma: put(&self.sigma) }
    }

    pub fn nll(&self, y: &Tensor<T>) -> Result<T> {
        let mut g = Graph::new();
        let v = self.to_vars(&mut g, false);
        let y = g.constant(y.clone());
        let l = nll_loss(&mut g, &v, y)?;
        Ok(g.value(l).data()[0])
    }

    pub fn prior(&self, lambda: &[f64]) -> Result<T> {
        let mut g = Graph::new();
        let v = self.to_vars(&mut g, false);
        let l = dirichlet_prior_loss(&mut g, v.alpha, lambda)?;
        Ok(g.value(l).data()[0])
    }
}

/// `ln φ` for every kernel: `[batch × M × d]` means against `[batch × d]` targets
/// gives `[batch × M]`. Evaluated in the log domain throughout.
pub fn log_gaussian_kernels<T: Scalar>(g: &mut Graph<T>, y: Var, mu: Var, sigma: Var) -> Result<Var> {
    let d = g.shape(mu).last().copied().unwrap_or(0);
    if let Some(index) = g.value(sigma).data().iter().position(|s| !(*s > T::zero())) {
        return Err(Error::Domain(format!("sigma must be positive (entry {index})")));
    }
    let sq = g.sq_dist_rows(mu, y)?;
    let ln_sigma = g.log(sigma)?;
    let neg2 = g.scale(ln_sigma, T::lit(-2.0));
    let inv_var = g.exp(neg2);
    let resid = g.mul(sq, inv_var)?;
    let resid = g.scale(resid, T::lit(-0.5));
    let norm = g.scale(ln_sigma, -T::lit(d as f64));
    let sum = g.add(resid, norm)?;
    let c = T::lit(d as f64 * 0.5) * (T::PI() + T::PI()).ln();
    Ok(g.offset(sum, -c))
}

/// Single-kernel form: `y, mu_i: [batch × d]`, `sigma_i: [batch]` → `[batch]`.
pub fn log_gaussian_kernel<T: Scalar>(g: &mut Graph<T>, y: Var, mu_i: Var, sigma_i: Var) -> Result<Var> {
    let (b, d) = match g.shape(mu_i) {
        [b, d] => (*b, *d),
        s => return Err(Error::Dimension(format!("mu_i must be [batch × d], got {s:?}"))),
    };
    let mu = g.reshape(mu_i, vec![b, 1, d])?;
    let sigma = g.reshape(sigma_i, vec![b, 1])?;
    let out = log_gaussian_kernels(g, y, mu, sigma)?;
    Ok(g.reshape(out, vec![b])?)
}

/// `−mean_b lse_i(ln α_bi + ln φ_bi)`.
pub fn nll_loss<T: Scalar>(g: &mut Graph<T>, p: &MdnParamVars, y: Var) -> Result<Var> {
    let (b, m) = match g.shape(p.alpha) {
        [b, m] => (*b, *m),
        s => return Err(Error::Dimension(format!("alpha must be [batch × M], got {s:?}"))),
    };
    if b == 0 {
        return Err(TensorError::EmptyInput { op: "nll_loss" }.into());
    }
    let d = g.shape(p.mu).last().copied().unwrap_or(0);
    if g.shape(y) != [b, d] {
        return Err(Error::Dimension(format!("target shape {:?} is not [{b} × {d}]", g.shape(y))));
    }
    let nan_row = |g: &Graph<T>, v: Var, width: usize| {
        g.value(v).data().iter().position(|x| x.is_nan()).map(|i| i / width.max(1))
    };
    for (v, width) in [(p.alpha, m), (p.sigma, m), (p.mu, m * d), (y, d)] {
        if let Some(index) = nan_row(g, v, width) {
            return Err(Error::Numeric { what: "nll_loss: NaN in sample".into(), index });
        }
    }
    let ln_phi = log_gaussian_kernels(g, y, p.mu, p.sigma)?;
    let ln_alpha = g.log(p.alpha)?;
    let joint = g.add(ln_alpha, ln_phi)?;
    let lse = g.log_sum_exp_rows(joint)?;
    if let Some(index) = g.value(lse).data().iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric { what: "nll_loss: non-finite likelihood for sample".into(), index });
    }
    let mean = g.mean(lse, None)?;
    Ok(g.neg(mean))
}

/// `−mean_b Σ_i (λ_i − 1) ln α_bi`.
pub fn dirichlet_prior_loss<T: Scalar>(g: &mut Graph<T>, alpha: Var, lambda: &[f64]) -> Result<Var> {
    let (b, m) = match g.shape(alpha) {
        [b, m] => (*b, *m),
        s => return Err(Error::Dimension(format!("alpha must be [batch × M], got {s:?}"))),
    };
    if lambda.len() != m {
        return Err(Error::config("lambda", format!("{} values for {m} kernels", lambda.len())));
    }
    if let Some(l) = lambda.iter().find(|l| !(**l > 0.0)) {
        return Err(Error::config("lambda", format!("{l} is not positive")));
    }
    if b == 0 {
        return Err(TensorError::EmptyInput { op: "dirichlet_prior_loss" }.into());
    }
    let ln_alpha = g.log(alpha)?;
    let weights: Vec<T> = (0..b).flat_map(|_| lambda.iter().map(|l| T::lit(l - 1.0))).collect();
    let w = g.constant(Tensor::new(vec![b, m], weights)?);
    let weighted = g.mul(ln_alpha, w)?;
    let s = g.sum(weighted, None)?;
    Ok(g.scale(s, -T::one() / T::lit(b as f64)))
}

pub fn total_loss<T: Scalar>(g: &mut Graph<T>, p: &MdnParamVars, y: Var, cfg: &MdnConfig) -> Result<Var> {
    let nll = nll_loss(g, p, y)?;
    let prior = dirichlet_prior_loss(g, p.alpha, &cfg.lambda)?;
    Ok(g.add(nll, prior)?)
}

/// Per sample: mean over kernel pairs of `‖μ_i − μ_j‖ / √d`.
pub fn hypothesis_spread<T: Scalar>(p: &MdnParams<T>) -> Result<Vec<T>> {
    let (m, d) = (p.kernels(), p.dim());
    if m < 2 {
        return Err(Error::Domain("hypothesis spread is undefined for a single kernel".into()));
    }
    let pairs = T::lit((m * (m - 1) / 2) as f64);
    let root_d = T::lit(d as f64).sqrt();
    Ok((0..p.batch())
        .map(|b| {
            let mut total = T::zero();
            for i in 0..m {
                for j in i + 1..m {
                    let dist: T = p
                        .hypothesis(b, i)
                        .iter()
                        .zip(p.hypothesis(b, j))
                        .map(|(&a, &c)| (a - c) * (a - c))
                        .sum::<T>()
                        .sqrt();
                    total += dist;
                }
            }
            total / pairs / root_d
        })
        .collect())
}

/// Three linear heads reading the same features.
#[derive(Clone, Debug, PartialEq)]
pub struct MdnHead<T> {
    pub alpha: LinearLayer<T>,
    pub sigma: LinearLayer<T>,
    pub mu: LinearLayer<T>,
    pub kernels: usize,
    pub dim: usize,
    pub gamma_elu: T,
    pub alpha_clip: [T; 2],
    pub sigma_clip: [T; 2],
}

impl<T: Scalar> MdnHead<T> {
    pub fn new(features: usize, dim: usize, cfg: &MdnConfig, rng: &mut dyn RngCore) -> Self {
        let m = cfg.m;
        Self {
            alpha: LinearLayer::kaiming(features, m, rng),
            sigma: LinearLayer::kaiming(features, m, rng),
            mu: LinearLayer::kaiming(features, m * dim, rng),
            kernels: m,
            dim,
            gamma_elu: T::lit(cfg.gamma_elu),
            alpha_clip: cfg.alpha_clip.map(T::lit),
            sigma_clip: cfg.sigma_clip.map(T::lit),
        }
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, features: Var) -> Result<MdnParamVars> {
        let batch = pass.graph.shape(features)[0];
        let logits = self.alpha.forward(pass, features)?;
        let s = self.sigma.forward(pass, features)?;
        let mu = self.mu.forward(pass, features)?;
        let g = &mut pass.graph;
        let alpha = g.softmax_rows(logits)?;
        let alpha = g.clamp(alpha, self.alpha_clip[0], self.alpha_clip[1]);
        let alpha = g.normalize_rows(alpha)?;
        // renormalizing can pull a floored entry a few ulps under the floor
        let alpha = g.clamp(alpha, self.alpha_clip[0], self.alpha_clip[1]);
        let sigma = g.modified_elu(s, self.gamma_elu);
        let sigma = g.clamp(sigma, self.sigma_clip[0], self.sigma_clip[1]);
        let mu = g.reshape(mu, vec![batch, self.kernels, self.dim])?;
        Ok(MdnParamVars { alpha, mu, sigma })
    }
}

impl<T: Scalar> Module<T> for MdnHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.alpha.visit(&format!("{prefix}alpha"), f);
        self.sigma.visit(&format!("{prefix}sigma"), f);
        self.mu.visit(&format!("{prefix}mu"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.alpha.visit_mut(&format!("{prefix}alpha"), f);
        self.sigma.visit_mut(&format!("{prefix}sigma"), f);
        self.mu.visit_mut(&format!("{prefix}mu"), f);
    }

    fn linear_layers_mut(&mut self) -> Vec<&mut LinearLayer<T>> {
        vec![&mut self.alpha, &mut self.sigma, &mut self.mu]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub dropout: f64,
    pub mdn: MdnConfig,
}

/// Feature extractor followed by the mixture head.
#[derive(Clone, Debug, PartialEq)]
pub struct MdnNetwork<T> {
    pub config: NetworkConfig,
    pub features: FeatureExtractor<T>,
    pub head: MdnHead<T>,
}

impl<T: Scalar> MdnNetwork<T> {
    pub fn new(config: NetworkConfig, rng: &mut dyn RngCore) -> Result<Self> {
        config.mdn.validate()?;
        if config.width == 0 || config.input_dim == 0 || config.output_dim == 0 {
            return Err(Error::config("width", "layer widths must be positive"));
        }
        let fc = FeatureConfig {
            input_dim: config.input_dim,
            width: config.width,
            blocks: config.blocks,
            dropout: config.dropout,
            ..FeatureConfig::default()
        };
        let features = FeatureExtractor::new(&fc, rng);
        let head = MdnHead::new(config.width, config.output_dim, &config.mdn, rng);
        Ok(Self { config, features, head })
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<MdnParamVars> {
        let h = self.features.forward(pass, x)?;
        self.head.forward(pass, h)
    }

    /// Eval-mode forward on a `[batch × input_dim]` tensor.
    pub fn predict(&self, x: &Tensor<T>) -> Result<MdnParams<T>> {
        let mut pass = Pass::eval();
        let xv = pass.input(x.clone());
        let p = self.forward(&mut pass, xv)?;
        Ok(MdnParams::from_vars(&pass.graph, &p))
    }
}

impl<T: Scalar> Module<T> for MdnNetwork<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.features.visit(&format!("{prefix}features"), f);
        self.head.visit(&format!("{prefix}head."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.features.visit_mut(&format!("{prefix}features"), f);
        self.head.visit_mut(&format!("{prefix}head."), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.features.visit_buffers(&format!("{prefix}features"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.features.visit_buffers_mut(&format!("{prefix}features"), f);
    }

    fn linear_layers_mut(&mut self) -> Vec<&mut LinearLayer<T>> {
        let mut out = self.features.linear_layers_mut();
        out.extend(self.head.linear_layers_mut());
        out
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut crate::nn::BatchNormLayer<T>> {
        self.features.batch_norms_mut()
    }
}
