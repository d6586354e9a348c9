//! Desk-scale hashing network: a ReLU MLP encoder followed by a single
//! fully-connected hash layer with tanh, plus reverse-mode gradients, Adam and
//! a cosine learning-rate schedule.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    /// ReLU hidden layer widths; empty for a single affine hash layer.
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub code_length: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be >= 1"));
        }
        if let Some(i) = self.hidden_dims.iter().position(|d| *d == 0) {
            return Err(Error::config(format!("hidden_dims[{i}]"), "must be >= 1"));
        }
        if self.code_length == 0 {
            return Err(Error::config("code_length", "must be >= 1"));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self
            .hidden_dims
            .iter()
            .chain(std::iter::once(&self.code_length))
        {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }
}

/// Fully-connected layer; `weight` is row-major `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

/// Activations recorded by [`HashModel::forward`]: the input to every layer
/// and the final code.
#[derive(Debug, Clone)]
pub struct Tape {
    layer_inputs: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// Gradients laid out like [`HashModel::tensors`]: `[w0, b0, w1, b1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub tensors: Vec<Vec<f64>>,
}

impl ModelGrads {
    pub fn zeros_like(model: &HashModel) -> Self {
        Self {
            tensors: model.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().flatten().all(|v| *v == 0.0)
    }
}

/// Encoder plus tanh hash head.
#[derive(Debug, Clone, PartialEq)]
pub struct HashModel {
    config: EncoderConfig,
    layers: Vec<Dense>,
}

impl HashModel {
    /// Hidden layers get Kaiming-uniform fan-in weights; the hash layer is
    /// uniform in `±1/√fan_in`. Biases start at zero.
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        let last = dims.len() - 1;
        let layers = dims
            .into_iter()
            .enumerate()
            .map(|(i, (fan_in, out))| {
                let bound = if i == last {
                    1.0 / (fan_in as f64).sqrt()
                } else {
                    (6.0 / fan_in as f64).sqrt()
                };
                let mut layer = Dense::zeros(fan_in, out);
                for w in &mut layer.weight {
                    *w = rng.random_range(-bound..bound);
                }
                layer
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// All weights and biases zero.
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Dense::zeros(i, o))
            .collect();
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn code_length(&self) -> usize {
        self.config.code_length
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_dim {
            return Err(Error::shape("input", self.config.input_dim, x.len()));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "input element {i} is not finite"
            )));
        }
        Ok(())
    }

    /// Computes the hash code of `x` and the tape needed by [`Self::backward`].
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut act = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.affine(&act);
            if i == last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            } else {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            layer_inputs.push(std::mem::replace(&mut act, z));
        }
        let output = act.clone();
        Ok((
            act,
            Tape {
                layer_inputs,
                output,
            },
        ))
    }

    /// Hash code only, without keeping a tape.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut act = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            act = layer.affine(&act);
            if i == last {
                act.iter_mut().for_each(|v| *v = v.tanh());
            } else {
                act.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(act)
    }

    /// Reverse-mode gradients of a scalar loss given `d loss / d h`.
    pub fn backward(&self, tape: &Tape, grad_h: &[f64]) -> Result<ModelGrads> {
        if tape.layer_inputs.len() != self.layers.len() {
            return Err(Error::shape(
                "tape layers",
                self.layers.len(),
                tape.layer_inputs.len(),
            ));
        }
        if grad_h.len() != self.config.code_length {
            return Err(Error::shape(
                "output gradient",
                self.config.code_length,
                grad_h.len(),
            ));
        }
        let n = self.layers.len();
        let mut tensors = vec![Vec::new(); 2 * n];
        // Gradient w.r.t. the pre-activation of the current layer.
        let mut delta: Vec<f64> = grad_h
            .iter()
            .zip(&tape.output)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let input = &tape.layer_inputs[i];
            if input.len() != layer.in_dim {
                return Err(Error::shape(
                    format!("tape layer {i}"),
                    layer.in_dim,
                    input.len(),
                ));
            }
            let mut gw = vec![0.0; layer.weight.len()];
            for (row, d) in gw.chunks_exact_mut(layer.in_dim).zip(&delta) {
                for (g, x) in row.iter_mut().zip(input) {
                    *g = d * x;
                }
            }
            if i > 0 {
                let mut prev = vec![0.0; layer.in_dim];
                for (row, d) in layer.weight.chunks_exact(layer.in_dim).zip(&delta) {
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
                // `input` is the previous layer's ReLU output.
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                tensors[2 * i + 1] = std::mem::replace(&mut delta, prev);
            } else {
                tensors[2 * i + 1] = std::mem::take(&mut delta);
            }
            tensors[2 * i] = gw;
        }
        Ok(ModelGrads { tensors })
    }
}

/// `base_lr · ½(1 + cos(π · step / total_steps))`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for a list of parameter tensors, with a cosine-decayed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub total_steps: u64,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, sizes: &[usize], total_steps: u64) -> Self {
        Self {
            config,
            total_steps,
            step: 0,
            first: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            second: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.step, self.total_steps, self.config.base_lr)
    }

    /// One bias-corrected Adam update; returns the learning rate used.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<f64> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::shape(
                "parameter tensors",
                self.first.len(),
                params.len(),
            ));
        }
        let lr = self.current_lr();
        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (t, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first[t].len() {
                return Err(Error::shape(
                    format!("tensor {t}"),
                    self.first[t].len(),
                    p.len(),
                ));
            }
            let (m, v) = (&mut self.first[t], &mut self.second[t]);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(lr)
    }
}
