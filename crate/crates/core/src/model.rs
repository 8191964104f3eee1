//! Supervised learners with a shareable "head" segment.
//!
//! A [`ModelState`] is a flat parameter vector plus an [`Architecture`] that
//! knows how to read it. The last layer (the head) is a contiguous range of
//! that vector; it is the only part a contributor ever shares. The reference
//! learner is multinomial logistic regression, whose head is the whole model,
//! so every quantity built on top of it stays convex.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::error::{Error, Result};

/// Smallest probability fed to the logarithm in the cross-entropy loss.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// The seam every learner implements: a forward pass to logits and a
/// backward pass from logit gradients to parameter gradients.
pub trait Learner {
    fn input_dim(&self) -> usize;
    fn class_count(&self) -> usize;
    fn param_count(&self) -> usize;
    /// Parameter indices of the last layer.
    fn head_range(&self) -> Range<usize>;
    fn logits(&self, params: &[f64], features: &[f64]) -> Vec<f64>;
    /// Accumulates `d loss / d params` into `grad` given `d loss / d logits`.
    /// With `head_only`, coordinates outside [`Learner::head_range`] are untouched.
    fn backprop(
        &self,
        params: &[f64],
        features: &[f64],
        dlogits: &[f64],
        grad: &mut [f64],
        head_only: bool,
    );
}

/// Multinomial logistic regression. Layout: weights `C x d` row-major, then `C` biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearSoftmax {
    pub input_dim: usize,
    pub classes: usize,
}

impl Learner for LinearSoftmax {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn class_count(&self) -> usize {
        self.classes
    }

    fn param_count(&self) -> usize {
        self.classes * (self.input_dim + 1)
    }

    fn head_range(&self) -> Range<usize> {
        0..self.param_count()
    }

    fn logits(&self, params: &[f64], features: &[f64]) -> Vec<f64> {
        affine(params, self.classes, self.input_dim, features)
    }

    fn backprop(
        &self,
        _params: &[f64],
        features: &[f64],
        dlogits: &[f64],
        grad: &mut [f64],
        _head_only: bool,
    ) {
        affine_backprop(grad, self.classes, self.input_dim, features, dlogits);
    }
}

/// One `tanh` hidden layer followed by a linear head.
/// Layout: `W1 (h x d)`, `b1 (h)`, `W2 (C x h)`, `b2 (C)`; the head is `W2, b2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwoLayerPerceptron {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl TwoLayerPerceptron {
    fn body_len(&self) -> usize {
        self.hidden * (self.input_dim + 1)
    }

    fn hidden_activations(&self, params: &[f64], features: &[f64]) -> Vec<f64> {
        let mut h = affine(&params[..self.body_len()], self.hidden, self.input_dim, features);
        h.iter_mut().for_each(|v| *v = v.tanh());
        h
    }
}

impl Learner for TwoLayerPerceptron {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn class_count(&self) -> usize {
        self.classes
    }

    fn param_count(&self) -> usize {
        self.body_len() + self.classes * (self.hidden + 1)
    }

    fn head_range(&self) -> Range<usize> {
        self.body_len()..self.param_count()
    }

    fn logits(&self, params: &[f64], features: &[f64]) -> Vec<f64> {
        let h = self.hidden_activations(params, features);
        affine(&params[self.body_len()..], self.classes, self.hidden, &h)
    }

    fn backprop(
        &self,
        params: &[f64],
        features: &[f64],
        dlogits: &[f64],
        grad: &mut [f64],
        head_only: bool,
    ) {
        let body = self.body_len();
        let h = self.hidden_activations(params, features);
        affine_backprop(&mut grad[body..], self.classes, self.hidden, &h, dlogits);
        if head_only {
            return;
        }
        let w2 = &params[body..body + self.classes * self.hidden];
        let mut dpre = vec![0.0; self.hidden];
        for (c, &dl) in dlogits.iter().enumerate() {
            let row = &w2[c * self.hidden..(c + 1) * self.hidden];
            for (j, &w) in row.iter().enumerate() {
                dpre[j] += dl * w;
            }
        }
        for (dp, &hj) in dpre.iter_mut().zip(&h) {
            *dp *= 1.0 - hj * hj;
        }
        affine_backprop(&mut grad[..body], self.hidden, self.input_dim, features, &dpre);
    }
}

fn affine(params: &[f64], outputs: usize, inputs: usize, x: &[f64]) -> Vec<f64> {
    let (weights, bias) = params[..outputs * (inputs + 1)].split_at(outputs * inputs);
    weights
        .chunks_exact(inputs)
        .zip(bias)
        .map(|(row, b)| b + dot(row, x))
        .collect()
}

/// Dot product with four independent accumulators so the loop vectorizes.
/// The summation order is fixed, so results stay deterministic.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (a4, a_rest) = a.split_at(a.len() - a.len() % 4);
    let (b4, b_rest) = b.split_at(a4.len());
    for (x, y) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = a_rest.iter().zip(b_rest).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn affine_backprop(grad: &mut [f64], outputs: usize, inputs: usize, x: &[f64], dout: &[f64]) {
    let (gw, gb) = grad[..outputs * (inputs + 1)].split_at_mut(outputs * inputs);
    for ((row, b), &d) in gw.chunks_exact_mut(inputs).zip(gb.iter_mut()).zip(dout) {
        if d == 0.0 {
            continue;
        }
        for (g, v) in row.iter_mut().zip(x) {
            *g += d * v;
        }
        *b += d;
    }
}

/// The learners shipped with the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Linear(LinearSoftmax),
    TwoLayer(TwoLayerPerceptron),
}

impl Architecture {
    fn learner(&self) -> &dyn Learner {
        match self {
            Architecture::Linear(l) => l,
            Architecture::TwoLayer(m) => m,
        }
    }
}

impl Learner for Architecture {
    fn input_dim(&self) -> usize {
        self.learner().input_dim()
    }
    fn class_count(&self) -> usize {
        self.learner().class_count()
    }
    fn param_count(&self) -> usize {
        self.learner().param_count()
    }
    fn head_range(&self) -> Range<usize> {
        self.learner().head_range()
    }
    fn logits(&self, params: &[f64], features: &[f64]) -> Vec<f64> {
        self.learner().logits(params, features)
    }
    fn backprop(
        &self,
        params: &[f64],
        features: &[f64],
        dlogits: &[f64],
        grad: &mut [f64],
        head_only: bool,
    ) {
        self.learner().backprop(params, features, dlogits, grad, head_only)
    }
}

/// Local training settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub freeze_body: bool,
    /// `None` means full-batch gradient descent; the stream is then unused.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { local_epochs: 5, learning_rate: 0.1, freeze_body: true, batch_size: None }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::invalid("local_epochs must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Settings for training until (near) convergence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub learning_rate: f64,
    /// Stop once the L2 norm of the mean gradient drops below this.
    pub grad_tol: f64,
    pub max_epochs: usize,
    /// Nesterov momentum with gradient-based restarts instead of plain
    /// descent. Same fixed points, far fewer epochs on ill-conditioned data.
    #[serde(default = "default_accelerated")]
    pub accelerated: bool,
}

fn default_accelerated() -> bool {
    true
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { learning_rate: 0.5, grad_tol: 1e-6, max_epochs: 10_000, accelerated: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Flat parameters, the head segment, and the architecture reading them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    params: Vec<f64>,
    head_range: Range<usize>,
    arch: Architecture,
}

impl ModelState {
    /// Builds a model from explicit parameters.
    pub fn new(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if arch.input_dim() == 0 || arch.class_count() < 2 {
            return Err(Error::invalid("need input_dim >= 1 and at least 2 classes"));
        }
        if params.len() != arch.param_count() {
            return Err(Error::DimensionMismatch { expected: arch.param_count(), found: params.len() });
        }
        Ok(ModelState { head_range: arch.head_range(), params, arch })
    }

    /// All-zero multinomial logistic regression (uniform predictions).
    pub fn linear(input_dim: usize, classes: usize) -> Result<Self> {
        let arch = Architecture::Linear(LinearSoftmax { input_dim, classes });
        Self::new(arch, vec![0.0; arch.param_count()])
    }

    /// Two-layer perceptron with a random first layer and a zero head.
    pub fn two_layer<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::invalid("hidden layer must be non-empty"));
        }
        let mlp = TwoLayerPerceptron { input_dim, hidden, classes };
        let scale = 1.0 / (input_dim as f64).sqrt();
        let mut params = vec![0.0; mlp.param_count()];
        for w in &mut params[..hidden * input_dim] {
            let z: f64 = StandardNormal.sample(rng);
            *w = z * scale;
        }
        Self::new(Architecture::TwoLayer(mlp), params)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn head_range(&self) -> Range<usize> {
        self.head_range.clone()
    }

    pub fn head(&self) -> &[f64] {
        &self.params[self.head_range.clone()]
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn class_count(&self) -> usize {
        self.arch.class_count()
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    fn check_example(&self, example: &LabeledExample) -> Result<()> {
        if example.features.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: example.features.len(),
            });
        }
        if example.label >= self.class_count() {
            return Err(Error::LabelOutOfRange { label: example.label, classes: self.class_count() });
        }
        Ok(())
    }

    /// Class probabilities for a feature vector.
    pub fn probabilities(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), found: features.len() });
        }
        Ok(softmax(&self.arch.logits(&self.params, features)))
    }

    /// Index of the largest logit (lowest index on ties).
    pub fn predict(&self, features: &[f64]) -> Result<usize> {
        if features.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), found: features.len() });
        }
        let logits = self.arch.logits(&self.params, features);
        Ok(argmax(&logits))
    }

    /// Cross-entropy loss of one example, with the probability clamped at
    /// [`PROBABILITY_FLOOR`].
    pub fn loss(&self, example: &LabeledExample) -> Result<f64> {
        self.check_example(example)?;
        Ok(self.loss_unchecked(example))
    }

    pub(crate) fn loss_unchecked(&self, example: &LabeledExample) -> f64 {
        let logits = self.arch.logits(&self.params, &example.features);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let log_p = (logits[example.label] - log_norm).max(PROBABILITY_FLOOR.ln());
        // -log p can come out as -0.0 or a tiny negative through rounding.
        (-log_p).max(0.0)
    }

    /// Mean loss over `data`, summed in an order-independent way.
    pub fn empirical_risk(&self, data: &[LabeledExample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("empirical risk of an empty dataset"));
        }
        let losses = data.iter().map(|z| self.loss(z)).collect::<Result<Vec<_>>>()?;
        Ok(order_independent_sum(losses) / data.len() as f64)
    }

    /// Mean gradient of the loss over `data`. With `head_only`, the body
    /// coordinates are left at zero.
    pub fn gradient(&self, data: &[LabeledExample], head_only: bool) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::invalid("gradient of an empty dataset"));
        }
        for z in data {
            self.check_example(z)?;
        }
        Ok(self.gradient_unchecked(data.iter(), data.len(), head_only))
    }

    fn gradient_unchecked<'a>(
        &self,
        data: impl Iterator<Item = &'a LabeledExample>,
        n: usize,
        head_only: bool,
    ) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        for z in data {
            let mut dlogits = softmax(&self.arch.logits(&self.params, &z.features));
            dlogits[z.label] -= 1.0;
            self.arch.backprop(&self.params, &z.features, &dlogits, &mut grad, head_only);
        }
        let inv = 1.0 / n as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        grad
    }

    fn step(&mut self, grad: &[f64], lr: f64, head_only: bool) -> Result<()> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericFailure("non-finite gradient".into()));
        }
        let range = if head_only { self.head_range.clone() } else { 0..self.params.len() };
        for i in range {
            self.params[i] -= lr * grad[i];
        }
        Ok(())
    }

    /// Runs `cfg.local_epochs` passes of gradient descent and returns the new
    /// state. The stream is only consumed when mini-batching is enabled.
    pub fn train<R: Rng + ?Sized>(
        &self,
        data: &[LabeledExample],
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<ModelState> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::invalid("cannot train on an empty dataset"));
        }
        for z in data {
            self.check_example(z)?;
        }
        let mut model = self.clone();
        let head_only = cfg.freeze_body;
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..cfg.local_epochs {
            match cfg.batch_size {
                None => {
                    let grad = model.gradient_unchecked(data.iter(), data.len(), head_only);
                    model.step(&grad, cfg.learning_rate, head_only)?;
                }
                Some(batch) => {
                    order.shuffle(rng);
                    for chunk in order.chunks(batch) {
                        let grad = model.gradient_unchecked(
                            chunk.iter().map(|&i| &data[i]),
                            chunk.len(),
                            head_only,
                        );
                        model.step(&grad, cfg.learning_rate, head_only)?;
                    }
                }
            }
        }
        Ok(model)
    }

    /// Full-batch descent on every parameter until the gradient norm drops
    /// below `cfg.grad_tol` or `cfg.max_epochs` is reached.
    pub fn fit(&self, data: &[LabeledExample], cfg: &FitConfig) -> Result<(ModelState, FitReport)> {
        self.fit_until(data, cfg, || false)
    }

    /// Like [`ModelState::fit`], polling `cancelled` once per epoch.
    pub fn fit_until(
        &self,
        data: &[LabeledExample],
        cfg: &FitConfig,
        cancelled: impl Fn() -> bool,
    ) -> Result<(ModelState, FitReport)> {
        if data.is_empty() {
            return Err(Error::invalid("cannot fit an empty dataset"));
        }
        if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
            return Err(Error::invalid("fit learning_rate must be positive"));
        }
        for z in data {
            self.check_example(z)?;
        }
        // `model` is where the gradient is taken (the look-ahead point when
        // accelerated); `previous` is the last plain-step iterate.
        let mut model = self.clone();
        let mut previous = self.params.clone();
        let mut t = 1.0_f64;
        let mut grad_norm = f64::INFINITY;
        for epoch in 0..cfg.max_epochs {
            if cancelled() {
                return Err(Error::Cancelled);
            }
            let grad = model.gradient_unchecked(data.iter(), data.len(), false);
            grad_norm = l2_norm(&grad);
            if grad_norm < cfg.grad_tol {
                return Ok((model, FitReport { epochs: epoch, grad_norm, converged: true }));
            }
            model.step(&grad, cfg.learning_rate, false)?;
            if !cfg.accelerated {
                continue;
            }
            let moved: f64 = grad.iter().zip(model.params.iter().zip(&previous)).map(|(g, (a, b))| g * (a - b)).sum();
            if moved > 0.0 {
                t = 1.0;
            }
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            let beta = (t - 1.0) / t_next;
            t = t_next;
            for (p, prev) in model.params.iter_mut().zip(previous.iter_mut()) {
                let x = *p;
                *p = x + beta * (x - *prev);
                *prev = x;
            }
        }
        let converged = grad_norm < cfg.grad_tol;
        Ok((model, FitReport { epochs: cfg.max_epochs, grad_norm, converged }))
    }

    fn check_compatible(&self, other: &ModelState) -> Result<()> {
        if self.arch != other.arch || self.head_range != other.head_range {
            return Err(Error::ArchitectureMismatch(format!("{:?} vs {:?}", self.arch, other.arch)));
        }
        Ok(())
    }

    /// A copy of this model with `delta` added to the head.
    pub fn with_head_offset(&self, delta: &[f64]) -> Result<ModelState> {
        if delta.len() != self.head_range.len() {
            return Err(Error::DimensionMismatch { expected: self.head_range.len(), found: delta.len() });
        }
        let mut out = self.clone();
        for (p, d) in out.params[self.head_range.clone()].iter_mut().zip(delta) {
            *p += d;
        }
        Ok(out)
    }
}

/// `after.head - before.head`.
pub fn head_delta(before: &ModelState, after: &ModelState) -> Result<Vec<f64>> {
    before.check_compatible(after)?;
    Ok(after.head().iter().zip(before.head()).map(|(a, b)| a - b).collect())
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Sums values so that the result does not depend on their order: values are
/// sorted first, then added with Neumaier compensation.
pub fn order_independent_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
