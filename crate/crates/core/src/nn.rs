//! Layers of the feature extractor: linear maps, batch normalization,
//! dropout and residual blocks.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward evaluation: the graph being recorded plus everything the
/// layers need to hand back to the caller afterwards.
///
/// Parameters are registered in traversal order; [`Module::visit_mut`]
/// yields them in that same order so gradients can be copied back.
pub struct Pass<'r, T> {
    pub graph: Graph<T>,
    mode: Mode,
    rng: Option<&'r mut dyn RngCore>,
    params: Vec<Var>,
    batch_stats: Vec<(Vec<T>, Vec<T>)>,
}

impl<'r, T: Scalar> Pass<'r, T> {
    pub fn new(mode: Mode, rng: Option<&'r mut dyn RngCore>) -> Self {
        Self { graph: Graph::new(), mode, rng, params: Vec::new(), batch_stats: Vec::new() }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, None)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    fn register(&mut self, t: &Tensor<T>) -> Var {
        let v = if self.mode == Mode::Train || t.requires_grad() {
            self.graph.param(t.clone())
        } else {
            self.graph.constant(t.clone())
        };
        self.params.push(v);
        v
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// Batch mean/variance of every batch-norm layer run in train mode, in order.
    pub fn batch_stats(&self) -> &[(Vec<T>, Vec<T>)] {
        &self.batch_stats
    }
}

/// Anything owning trainable tensors.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));
    /// Non-trainable state (batch-norm running statistics).
    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Tensor<T>)) {}
    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Tensor<T>)) {}
    fn linear_layers_mut(&mut self) -> Vec<&mut LinearLayer<T>>;
    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormLayer<T>> {
        Vec::new()
    }

    /// Copies gradients recorded in `pass` into the parameters' grad buffers.
    fn accumulate_grads(&mut self, pass: &Pass<'_, T>) -> Result<()> {
        let mut i = 0;
        let mut outcome = Ok(());
        self.visit_mut("", &mut |name, t| {
            if outcome.is_err() {
                return;
            }
            let Some(&v) = pass.params.get(i) else {
                outcome = Err(Error::Dimension(format!("parameter {name} was not used in the pass")));
                return;
            };
            i += 1;
            if let Some(g) = pass.graph.grad(v) {
                if let Err(e) = t.accumulate_grad(g) {
                    outcome = Err(e.into());
                }
            }
        });
        outcome?;
        if i != pass.params.len() {
            return Err(Error::Dimension(format!(
                "pass registered {} parameters, module owns {i}",
                pass.params.len()
            )));
        }
        Ok(())
    }

    /// Applies the running-statistics updates collected by a train-mode pass.
    fn apply_batch_stats(&mut self, pass: &Pass<'_, T>) -> Result<()> {
        let mut norms = self.batch_norms_mut();
        if pass.mode == Mode::Eval {
            return Ok(());
        }
        if norms.len() != pass.batch_stats.len() {
            return Err(Error::Dimension(format!(
                "{} batch-norm layers but {} batch statistics",
                norms.len(),
                pass.batch_stats.len()
            )));
        }
        for (bn, (mean, var)) in norms.iter_mut().zip(&pass.batch_stats) {
            bn.update_running(mean, var);
        }
        Ok(())
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, t| t.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x·W + b` with `W: [in × out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![in_features, out_features]).with_requires_grad(true),
            bias: Tensor::zeros(vec![out_features]).with_requires_grad(true),
        }
    }

    pub fn kaiming(in_features: usize, out_features: usize, rng: &mut dyn RngCore) -> Self {
        let mut layer = Self::zeros(in_features, out_features);
        layer.kaiming_init(rng);
        layer
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Weights ~ N(0, 2 / fan_in), bias zeroed.
    pub fn kaiming_init(&mut self, rng: &mut dyn RngCore) {
        let std = (2.0 / self.in_features() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for w in self.weight.data_mut() {
            *w = T::lit(normal.sample(rng));
        }
        self.bias.data_mut().iter_mut().for_each(|b| *b = T::zero());
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let width = pass.graph.shape(x).get(1).copied();
        if pass.graph.shape(x).len() != 2 || width != Some(self.in_features()) {
            return Err(Error::Dimension(format!(
                "linear layer expects [batch × {}], got {:?}",
                self.in_features(),
                pass.graph.shape(x)
            )));
        }
        let w = pass.register(&self.weight);
        let b = pass.register(&self.bias);
        let h = pass.graph.matmul(x, w)?;
        Ok(pass.graph.add_bias(h, b)?)
    }

    /// Euclidean norm of each column (the incoming weights of one output unit).
    pub fn column_norms(&self) -> Vec<T> {
        let (rows, cols) = (self.in_features(), self.out_features());
        let mut sq = vec![T::zero(); cols];
        for row in self.weight.data().chunks(cols).take(rows) {
            for (acc, &w) in sq.iter_mut().zip(row) {
                *acc += w * w;
            }
        }
        sq.into_iter().map(T::sqrt).collect()
    }

    /// Rescales every column whose norm exceeds `bound` onto the bound.
    pub fn max_norm_project(&mut self, bound: T) {
        let norms = self.column_norms();
        let cols = self.out_features();
        let w = self.weight.data_mut();
        // a few ulps of slack so a projected column is not rescaled again
        let slack = bound * T::epsilon() * T::lit(4.0);
        for (j, &n) in norms.iter().enumerate() {
            if n > bound + slack {
                let s = bound / n;
                for row in w.chunks_mut(cols) {
                    row[j] *= s;
                }
            }
        }
    }
}

impl<T: Scalar> Module<T> for LinearLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }

    fn linear_layers_mut(&mut self) -> Vec<&mut LinearLayer<T>> {
        vec![self]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Scalar> BatchNormLayer<T> {
    pub fn new(features: usize, momentum: T, epsilon: T) -> Self {
        Self {
            gamma: Tensor::full(vec![features], T::one()).with_requires_grad(true),
            beta: Tensor::zeros(vec![features]).with_requires_grad(true),
            running_mean: Tensor::zeros(vec![features]),
            running_var: Tensor::full(vec![features], T::one()),
            momentum,
            epsilon,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.numel()
    }

    /// Train mode normalizes by batch statistics (recorded in `pass` for a
    /// later [`Module::apply_batch_stats`]); eval mode uses running statistics.
    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let gamma = pass.register(&self.gamma);
        let beta = pass.register(&self.beta);
        match pass.mode {
            Mode::Train => {
                let (y, mean, var) = pass.graph.batch_norm_train(x, gamma, beta, self.epsilon)?;
                pass.batch_stats.push((mean, var));
                Ok(y)
            }
            Mode::Eval => Ok(pass.graph.batch_norm_eval(
                x,
                gamma,
                beta,
                self.running_mean.data(),
                self.running_var.data(),
                self.epsilon,
            )?),
        }
    }

    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn update_running(&mut self, mean: &[T], var: &[T]) {
        let m = self.momentum;
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = keep * *r + m * b;
        }
    }
}

impl<T: Scalar> Module<T> for BatchNormLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }

    fn linear_layers_mut(&mut self) -> Vec<&mut LinearLayer<T>> {
        Vec::new()
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormLayer<T>> {
        vec![self]
    }
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1/(1 − rate)`; eval mode is the identity.
pub fn dropout_forward<T: Scalar>(pass: &mut Pass<'_, T>, x: Var, rate: T) -> Result<Var> {
    if !(rate >= T::zero() && rate < T::one()) {
        return Err(Error::config("dropout", format!("rate {rate} outside [0, 1)")));
    }
    if pass.mode == Mode::Eval || rate == T::zero() {
        return Ok(x);
    }
    let rng = pass
        .rng
        .as_deref_mut()
        .ok_or_else(|| Error::config("dropout", "train-mode dropout needs an RNG"))?;
    let keep = T::one() / (T::one() - rate);
    let p = rate.to_f64_lossless();
    let shape = pass.graph.shape(x).to_vec();
    let n = shape.iter().product();
    let mask: Vec<T> = (0..n).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
    let mask = pass.graph.constant(Tensor::new(shape, mask)?);
    Ok(pass.graph.mul(x, mask)?)
}

/// linear → batch-norm → ReLU → dropout.
#[derive(Clone, Debug, PartialEq)]
pub struct SubStack<T> {
    pub linear: LinearLayer<T>,
    pub norm: BatchNormLayer<T>,
}

/// Two sub-stacks with a skip connection from block input to block output.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<T> {
    pub stages: [SubStack<T>; 2],
    pub dropout: T,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(width: usize, dropout: T, bn: (T, T), rng: &mut dyn RngCore) -> Self {
        let stage = |rng: &mut dyn RngCore| SubStack {
            linear: LinearLayer::kaiming(width, width, rng),
            norm: BatchNormLayer::new(width, bn.0, bn.1),
        };
        let first = stage(rng);
        let second = stage(rng);
        Self { stages: [first, second], dropout }
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for s in &self.stages {
            h = s.linear.forward(pass, h)?;
            h = s.norm.forward(pass, h)?;
            h = pass.graph.relu(h);
            h = dropout_forward(pass, h, self.dropout)?;
        }
        Ok(pass.graph.add(x, h)?)
    }
}

impl<T: Scalar> Module<T> for ResidualBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.linear.visit(&join(prefix, &format!("{i}.linear")), f);
            s.norm.visit(&join(prefix, &format!("{i}.norm")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.linear.visit_mut(&join(prefix, &format!("{i}.linear")), f);
            s.norm.visit_mut(&join(prefix, &format!("{i}.norm")), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.norm.visit_buffers(&join(prefix, &format!("{i}.norm")), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.norm.visit_buffers_mut(&join(prefix, &format!("{i}.norm")), f);
        }
    }

    fn linear_layers_mut(&mut self) -> Vec<&mut LinearLayer<T>> {
        self.stages.iter_mut().map(|s| &mut s.linear).collect()
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormLayer<T>> {
        self.stages.iter_mut().map(|s| &mut s.norm).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureConfig {
    pub input_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { input_dim: 32, width: 1024, blocks: 2, dropout: 0.5, bn_momentum: 0.1, bn_epsilon: 1e-5 }
    }
}

/// Linear lift `R^{2N} → R^{width}` followed by residual blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T> {
    pub lift: LinearLayer<T>,
    pub blocks: Vec<ResidualBlock<T>>,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new(cfg: &FeatureConfig, rng: &mut dyn RngCore) -> Self {
        let lift = LinearLayer::kaiming(cfg.input_dim, cfg.width, rng);
        let bn = (T::lit(cfg.bn_momentum), T::lit(cfg.bn_epsilon));
        let blocks = (0..cfg.blocks)
            .map(|_| ResidualBlock::new(cfg.width, T::lit(cfg.dropout), bn, rng))
            .collect();
        Self { lift, blocks }
    }

    pub fn input_dim(&self) -> usize {
        self.lift.in_features()
    }

    pub fn width(&self) -> usize {
        self.lift.out_features()
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let mut h = self.lift.forward(pass, x)?;
        for b in &self.blocks {
            h = b.forward(pass, h)?;
        }
        Ok(h)
    }
}

impl<T: Scalar> Module<T> for FeatureExtractor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.lift.visit(&join(prefix, "lift"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.lift.visit_mut(&join(prefix, "lift"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_buffers(&join(prefix, &format!("blocks.{i}")), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_buffers_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
    }

    fn linear_layers_mut(&mut self) -> Vec<&mut LinearLayer<T>> {
        let mut out = vec![&mut self.lift];
        for b in &mut self.blocks {
            out.extend(b.linear_layers_mut());
        }
        out
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormLayer<T>> {
        self.blocks.iter_mut().flat_map(|b| b.batch_norms_mut()).collect()
    }
}
