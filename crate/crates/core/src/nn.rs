//! Minimal trainable MLPs with hand-written forward/backward passes and Adam.
//!
//! Hidden layers use ReLU with optional inverted dropout; the output layer
//! applies one of identity / sigmoid / softplus. Everything is `f64` and
//! deterministic given an explicit RNG.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{sigmoid, sigmoid_deriv_from_output, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    Identity,
    Sigmoid,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dense feed-forward network. Weights are row-major `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    output_activation: OutputActivation,
    dropout: f64,
}

/// Activation record from a forward call; consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Vec<f64>,
    /// Post-activation (and post-dropout) value of each hidden layer.
    hidden: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    hidden_pre: Vec<Vec<f64>>,
    /// Inverted-dropout scale per hidden unit (1/(1-p) kept, 0 dropped), train mode only.
    masks: Option<Vec<Vec<f64>>>,
    /// Output after the output activation.
    output: Vec<f64>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// Per-layer parameter gradients, same shapes as the network.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub d_weights: Vec<Vec<f64>>,
    pub d_biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrads {
            d_weights: mlp.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            d_biases: mlp.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.d_biases.iter_mut().zip(&other.d_biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for (w, b) in self.d_weights.iter().zip(&self.d_biases) {
            flat.extend_from_slice(w);
            flat.extend_from_slice(b);
        }
        flat
    }
}

impl Mlp {
    /// Builds a zero-initialized network. `widths` lists layer sizes from
    /// input to output, so `widths.len() >= 2`.
    pub fn new(widths: &[usize], output_activation: OutputActivation, dropout: f64) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        assert!((0.0..1.0).contains(&dropout));
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for k in 0..widths.len() - 1 {
            weights.push(vec![0.0; widths[k + 1] * widths[k]]);
            biases.push(vec![0.0; widths[k + 1]]);
        }
        Mlp {
            widths: widths.to_vec(),
            weights,
            biases,
            output_activation,
            dropout,
        }
    }

    /// He-normal init for all layers, then a small-scale final layer
    /// (std `final_std`, zero when 0) which keeps early outputs near the
    /// activation midpoint.
    pub fn init_random(&mut self, rng: &mut ChaCha8Rng, final_std: f64) {
        let last = self.weights.len() - 1;
        for k in 0..self.weights.len() {
            let fan_in = self.widths[k] as f64;
            let std = if k == last { final_std } else { (2.0 / fan_in).sqrt() };
            for w in &mut self.weights[k] {
                *w = gaussian(rng) * std;
            }
            for b in &mut self.biases[k] {
                *b = 0.0;
            }
        }
    }

    pub fn set_final_bias(&mut self, values: &[f64]) {
        let last = self.biases.len() - 1;
        assert_eq!(values.len(), self.biases[last].len());
        self.biases[last].copy_from_slice(values);
    }

    pub fn set_final_bias_constant(&mut self, value: f64) {
        let last = self.biases.len() - 1;
        for b in &mut self.biases[last] {
            *b = value;
        }
    }

    pub fn zero_final_layer(&mut self) {
        let last = self.weights.len() - 1;
        for w in &mut self.weights[last] {
            *w = 0.0;
        }
        for b in &mut self.biases[last] {
            *b = 0.0;
        }
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output_activation
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn layer(&self, k: usize) -> (&[f64], &[f64]) {
        (&self.weights[k], &self.biases[k])
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            flat.extend_from_slice(w);
            flat.extend_from_slice(b);
        }
        flat
    }

    pub fn set_params_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut off = 0;
        for k in 0..self.weights.len() {
            let wl = self.weights[k].len();
            self.weights[k].copy_from_slice(&flat[off..off + wl]);
            off += wl;
            let bl = self.biases[k].len();
            self.biases[k].copy_from_slice(&flat[off..off + bl]);
            off += bl;
        }
    }

    /// Forward pass. `rng` is required iff `mode == Train` and dropout > 0.
    pub fn forward(&self, input: &[f64], mode: Mode, mut rng: Option<&mut ChaCha8Rng>) -> Result<(Vec<f64>, MlpCache)> {
        if input.len() != self.widths[0] {
            return Err(Error::dim("mlp input (layer 0)", self.widths[0], input.len()));
        }
        let use_dropout = mode == Mode::Train && self.dropout > 0.0;
        if use_dropout && rng.is_none() {
            return Err(Error::data("train-mode forward with dropout requires an rng"));
        }

        let n_layers = self.weights.len();
        let mut hidden = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut hidden_pre = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut masks: Option<Vec<Vec<f64>>> = if use_dropout { Some(Vec::new()) } else { None };

        let mut act: Vec<f64> = input.to_vec();
        for k in 0..n_layers {
            let z = affine(&self.weights[k], &self.biases[k], &act, self.widths[k + 1], self.widths[k]);
            if k + 1 == n_layers {
                let output = apply_output(&z, self.output_activation);
                return Ok((
                    output.clone(),
                    MlpCache {
                        input: input.to_vec(),
                        hidden,
                        hidden_pre,
                        masks,
                        output,
                    },
                ));
            }
            let mut a: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
            if use_dropout {
                let keep = 1.0 - self.dropout;
                let scale = 1.0 / keep;
                let rng = rng.as_deref_mut().unwrap();
                let mask: Vec<f64> = (0..a.len())
                    .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
                    .collect();
                for (v, m) in a.iter_mut().zip(&mask) {
                    *v *= m;
                }
                masks.as_mut().unwrap().push(mask);
            }
            hidden_pre.push(z);
            hidden.push(a.clone());
            act = a;
        }
        unreachable!("loop always returns at the output layer");
    }

    /// Deterministic eval-mode forward without the cache.
    pub fn forward_eval(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input, Mode::Eval, None)?.0)
    }

    /// Backward pass for a cache produced by `forward` on this network.
    ///
    /// Gradients are exact for the realized dropout mask.
    pub fn backward(&self, cache: &MlpCache, grad_output: &[f64]) -> Result<(Vec<f64>, MlpGrads)> {
        let n_layers = self.weights.len();
        if grad_output.len() != self.output_width() {
            return Err(Error::dim("mlp grad_output", self.output_width(), grad_output.len()));
        }
        if cache.input.len() != self.widths[0] || cache.hidden.len() != n_layers - 1 {
            return Err(Error::data("mlp cache does not match this network"));
        }

        let mut grads = MlpGrads::zeros_like(self);

        // Output activation.
        let mut delta: Vec<f64> = match self.output_activation {
            OutputActivation::Identity => grad_output.to_vec(),
            OutputActivation::Sigmoid => grad_output
                .iter()
                .zip(&cache.output)
                .map(|(&g, &y)| g * sigmoid_deriv_from_output(y))
                .collect(),
            OutputActivation::Softplus => {
                // softplus'(z) = sigmoid(z); recover z from y: z = ln(e^y - 1).
                grad_output
                    .iter()
                    .zip(&cache.output)
                    .map(|(&g, &y)| g * (1.0 - (-y).exp()))
                    .collect()
            }
        };

        for k in (0..n_layers).rev() {
            let prev: &[f64] = if k == 0 { &cache.input } else { &cache.hidden[k - 1] };
            let (out_dim, in_dim) = (self.widths[k + 1], self.widths[k]);
            // Parameter gradients for layer k.
            for o in 0..out_dim {
                let d = delta[o];
                grads.d_biases[k][o] += d;
                if d != 0.0 {
                    let row = &mut grads.d_weights[k][o * in_dim..(o + 1) * in_dim];
                    for (wg, &p) in row.iter_mut().zip(prev) {
                        *wg += d * p;
                    }
                }
            }
            // Propagate to the previous activation.
            let mut grad_prev = vec![0.0; in_dim];
            for o in 0..out_dim {
                let d = delta[o];
                if d != 0.0 {
                    let row = &self.weights[k][o * in_dim..(o + 1) * in_dim];
                    for (gp, &w) in grad_prev.iter_mut().zip(row) {
                        *gp += d * w;
                    }
                }
            }
            if k == 0 {
                return Ok((grad_prev, grads));
            }
            // Through dropout and ReLU of hidden layer k-1.
            let pre = &cache.hidden_pre[k - 1];
            if let Some(masks) = &cache.masks {
                for ((g, &z), &m) in grad_prev.iter_mut().zip(pre).zip(&masks[k - 1]) {
                    *g *= m * if z > 0.0 { 1.0 } else { 0.0 };
                }
            } else {
                for (g, &z) in grad_prev.iter_mut().zip(pre) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            delta = grad_prev;
        }
        unreachable!("loop returns at k == 0");
    }
}

fn affine(weights: &[f64], biases: &[f64], input: &[f64], out_dim: usize, in_dim: usize) -> Vec<f64> {
    let mut out = biases.to_vec();
    for o in 0..out_dim {
        let row = &weights[o * in_dim..(o + 1) * in_dim];
        let mut acc = 0.0;
        for (&w, &x) in row.iter().zip(input) {
            acc += w * x;
        }
        out[o] += acc;
    }
    out
}

fn apply_output(z: &[f64], activation: OutputActivation) -> Vec<f64> {
    match activation {
        OutputActivation::Identity => z.to_vec(),
        OutputActivation::Sigmoid => z.iter().map(|&v| sigmoid(v)).collect(),
        OutputActivation::Softplus => z.iter().map(|&v| softplus(v)).collect(),
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per sample keeps the stream usage simple.
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Draws `n` independent N(0, std^2) samples.
pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| gaussian(rng) * std).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam state for one flat parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(param_len: usize, hyper: AdamHyper) -> Self {
        AdamState {
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
            t: 0,
            hyper,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim("adam grads", params.len(), grads.len()));
    }
    if params.len() != state.m.len() {
        return Err(Error::dim("adam state", params.len(), state.m.len()));
    }
    state.t += 1;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
    Ok(())
}
