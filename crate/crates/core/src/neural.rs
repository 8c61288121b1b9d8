//! Small feedforward networks with hand-written backprop.
//!
//! Parameters live in one flat vector. Layer `l` occupies
//! `[W_l (out x in, row-major), b_l]`, so optimisers only ever see a slice.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Scalar output squashed into (0, 1).
    Sigmoid,
    Softmax,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    activation: Activation,
    head: Head,
    params: Vec<f64>,
}

/// Activations recorded by [`MlpParams::forward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to every layer, plus the final pre-head output at the end.
    layers: Vec<Vec<f64>>,
    output: Vec<f64>,
    n_params: usize,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Pre-head output of the last layer.
    pub fn logits(&self) -> &[f64] {
        self.layers.last().expect("cache always holds the input")
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(z))` without overflow.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Binary cross-entropy on a logit; returns (loss, d loss / d logit).
pub fn bce_with_logits(logit: f64, label: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - label)
}

impl MlpParams {
    fn check_sizes(layer_sizes: &[usize], head: Head) -> Result<()> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument("network needs at least an input and an output layer".into()));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument("layer sizes must be positive".into()));
        }
        if head == Head::Sigmoid && *layer_sizes.last().unwrap() != 1 {
            return Err(Error::InvalidArgument("sigmoid head needs a scalar output".into()));
        }
        Ok(())
    }

    fn count(layer_sizes: &[usize]) -> usize {
        layer_sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    /// Uniform weights in `±1/sqrt(fan_in)`, zero biases.
    pub fn init(layer_sizes: &[usize], activation: Activation, head: Head, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes, activation, head)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..net.n_layers() {
            let bound = 1.0 / (layer_sizes[l] as f64).sqrt();
            for w in net.weights_mut(l) {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(layer_sizes: &[usize], activation: Activation, head: Head) -> Result<Self> {
        Self::check_sizes(layer_sizes, head)?;
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            head,
            params: vec![0.0; Self::count(layer_sizes)],
        })
    }

    pub fn from_flat(layer_sizes: &[usize], activation: Activation, head: Head, params: Vec<f64>) -> Result<Self> {
        Self::check_sizes(layer_sizes, head)?;
        let expected = Self::count(layer_sizes);
        if params.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: params.len() });
        }
        Ok(Self { layer_sizes: layer_sizes.to_vec(), activation, head, params })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offset(&self, l: usize) -> usize {
        self.layer_sizes[..=l].windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    fn weight_range(&self, l: usize) -> std::ops::Range<usize> {
        let start = self.offset(l);
        start..start + self.layer_sizes[l + 1] * self.layer_sizes[l]
    }

    fn bias_range(&self, l: usize) -> std::ops::Range<usize> {
        let start = self.weight_range(l).end;
        start..start + self.layer_sizes[l + 1]
    }

    /// Row-major `(out x in)` weights of layer `l`.
    pub fn weights(&self, l: usize) -> &[f64] {
        &self.params[self.weight_range(l)]
    }

    pub fn biases(&self, l: usize) -> &[f64] {
        &self.params[self.bias_range(l)]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        let r = self.weight_range(l);
        &mut self.params[r]
    }

    pub fn biases_mut(&mut self, l: usize) -> &mut [f64] {
        let r = self.bias_range(l);
        &mut self.params[r]
    }

    fn act(&self, z: f64) -> f64 {
        match self.activation {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn act_grad(&self, a: f64) -> f64 {
        match self.activation {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<ForwardCache> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: input.len() });
        }
        let n = self.n_layers();
        let mut layers = Vec::with_capacity(n + 1);
        layers.push(input.to_vec());
        for l in 0..n {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = self.weights(l);
            let b = self.biases(l);
            let x = &layers[l];
            let mut z: Vec<f64> = (0..n_out)
                .map(|o| b[o] + w[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
                .collect();
            if l + 1 < n {
                for v in &mut z {
                    *v = self.act(*v);
                }
            }
            layers.push(z);
        }
        let logits = layers.last().unwrap();
        let output = match self.head {
            Head::Linear => logits.clone(),
            Head::Sigmoid => vec![sigmoid(logits[0])],
            Head::Softmax => {
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            }
        };
        Ok(ForwardCache { layers, output, n_params: self.params.len() })
    }

    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.output)
    }

    /// Pre-head output; for a sigmoid head this is the logit.
    pub fn logits(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.layers.pop().unwrap())
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        if cache.n_params != self.params.len() || cache.layers.len() != self.layer_sizes.len() {
            return Err(Error::InvalidArgument("forward cache does not belong to this network".into()));
        }
        Ok(())
    }

    /// Converts a gradient on the head output into one on the logits.
    fn head_backward(&self, cache: &ForwardCache, grad_output: &[f64]) -> Vec<f64> {
        let y = &cache.output;
        match self.head {
            Head::Linear => grad_output.to_vec(),
            Head::Sigmoid => vec![grad_output[0] * y[0] * (1.0 - y[0])],
            Head::Softmax => {
                let dot: f64 = grad_output.iter().zip(y).map(|(g, p)| g * p).sum();
                y.iter().zip(grad_output).map(|(p, g)| p * (g - dot)).collect()
            }
        }
    }

    /// Gradient w.r.t. the head output; returns (parameter grad, input grad).
    pub fn backward(&self, cache: &ForwardCache, grad_output: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![0.0; self.params.len()];
        let gi = self.backward_into(cache, grad_output, &mut grads)?;
        Ok((grads, gi))
    }

    pub fn backward_logits(&self, cache: &ForwardCache, grad_logits: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![0.0; self.params.len()];
        let gi = self.backward_logits_into(cache, grad_logits, &mut grads)?;
        Ok((grads, gi))
    }

    /// Like [`backward`](Self::backward) but adds into `grads`.
    pub fn backward_into(&self, cache: &ForwardCache, grad_output: &[f64], grads: &mut [f64]) -> Result<Vec<f64>> {
        self.check_cache(cache)?;
        if grad_output.len() != self.output_dim() {
            return Err(Error::DimensionMismatch { expected: self.output_dim(), got: grad_output.len() });
        }
        let g = self.head_backward(cache, grad_output);
        self.backward_logits_into(cache, &g, grads)
    }

    pub fn backward_logits_into(&self, cache: &ForwardCache, grad_logits: &[f64], grads: &mut [f64]) -> Result<Vec<f64>> {
        self.check_cache(cache)?;
        if grad_logits.len() != self.output_dim() {
            return Err(Error::DimensionMismatch { expected: self.output_dim(), got: grad_logits.len() });
        }
        if grads.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), got: grads.len() });
        }
        let mut delta = grad_logits.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let x = &cache.layers[l];
            let wr = self.weight_range(l);
            let br = self.bias_range(l);
            let w = &self.params[wr.clone()];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                grads[br.start + o] += d;
                let row = wr.start + o * n_in;
                for i in 0..n_in {
                    grads[row + i] += d * x[i];
                    prev[i] += d * w[o * n_in + i];
                }
            }
            if l > 0 {
                for (p, a) in prev.iter_mut().zip(x) {
                    *p *= self.act_grad(*a);
                }
            }
            delta = prev;
        }
        Ok(delta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Ascend,
    Descend,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {learning_rate} must be positive")));
        }
        Ok(Self { kind, learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new(), t: 0 })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], direction: Direction) -> Result<()> {
        if grad.len() != params.len() {
            return Err(Error::DimensionMismatch { expected: params.len(), got: grad.len() });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i} is {}", grad[i])));
        }
        let sign = match direction {
            Direction::Ascend => 1.0,
            Direction::Descend => -1.0,
        };
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p += sign * self.learning_rate * g;
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != params.len() {
                    self.m = vec![0.0; params.len()];
                    self.v = vec![0.0; params.len()];
                }
                let t = self.t as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    let mhat = self.m[i] / c1;
                    let vhat = self.v[i] / c2;
                    params[i] += sign * self.learning_rate * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    role: Option<String>,
    #[serde(flatten)]
    net: MlpParams,
}

pub fn save_checkpoint<W: std::io::Write>(net: &MlpParams, role: Option<&str>, w: W) -> Result<()> {
    let ck = Checkpoint { role: role.map(str::to_string), net: net.clone() };
    serde_json::to_writer(w, &ck).map_err(|e| Error::Parse(e.to_string()))
}

/// Loads a checkpoint; errors when `role` is given and does not match.
pub fn load_checkpoint<R: std::io::Read>(r: R, role: Option<&str>) -> Result<MlpParams> {
    let ck: Checkpoint = serde_json::from_reader(r).map_err(|e| Error::Parse(e.to_string()))?;
    if let Some(want) = role {
        if ck.role.as_deref() != Some(want) {
            return Err(Error::Parse(format!("checkpoint role {:?}, expected {want}", ck.role)));
        }
    }
    let n = ck.net;
    MlpParams::from_flat(&n.layer_sizes, n.activation, n.head, n.params)
}
