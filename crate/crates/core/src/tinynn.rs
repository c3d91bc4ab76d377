//! Small fully connected ReLU networks with reverse-mode gradients, and Adam.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simulate::RngStream;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("expected input of length {expected}, got {got}")]
    Shape { expected: usize, got: usize },
}

/// Dense network: ReLU on hidden layers, identity output.
///
/// Parameters are stored flat, layer by layer, as a row-major `out x in`
/// weight matrix followed by the `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
}

/// Activations retained by a forward pass for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    /// He-uniform weights, zero biases.
    pub fn new(widths: &[usize], rng: &mut RngStream) -> Self {
        assert!(widths.len() >= 2 && widths.iter().all(|&w| w > 0));
        let mut net = Self::zeros(widths);
        let mut offset = 0;
        for k in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[k], widths[k + 1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in &mut net.params[offset..offset + fan_in * fan_out] {
                *w = rng.random_range(-bound..bound);
            }
            offset += (fan_in + 1) * fan_out;
        }
        net
    }

    pub fn zeros(widths: &[usize]) -> Self {
        let count = widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum();
        Mlp {
            widths: widths.to_vec(),
            params: vec![0.0; count],
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Zeroes the last layer so the initial output is identically zero.
    pub fn zero_output_layer(&mut self) {
        let k = self.widths.len() - 2;
        let size = (self.widths[k] + 1) * self.widths[k + 1];
        let len = self.params.len();
        self.params[len - size..].iter_mut().for_each(|p| *p = 0.0);
    }

    /// `(weights, biases)` of layer `k`.
    pub fn layer(&self, k: usize) -> (&[f64], &[f64]) {
        let offset: usize = self.widths[..k + 1]
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum();
        let (i, o) = (self.widths[k], self.widths[k + 1]);
        let w = &self.params[offset..offset + i * o];
        let b = &self.params[offset + i * o..offset + (i + 1) * o];
        (w, b)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        let mut tape = Tape::default();
        self.forward_tape(input, &mut tape)?;
        Ok(tape.acts.pop().unwrap())
    }

    /// Forward pass recording activations in `tape` (buffers are reused).
    pub fn forward_tape(&self, input: &[f64], tape: &mut Tape) -> Result<(), NnError> {
        if input.len() != self.widths[0] {
            return Err(NnError::Shape {
                expected: self.widths[0],
                got: input.len(),
            });
        }
        let layers = self.widths.len();
        tape.acts.resize_with(layers, Vec::new);
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(input);
        let mut offset = 0;
        for k in 0..layers - 1 {
            let (fan_in, fan_out) = (self.widths[k], self.widths[k + 1]);
            let (prev, rest) = tape.acts.split_at_mut(k + 1);
            let a = &prev[k];
            let out = &mut rest[0];
            out.clear();
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            let hidden = k + 2 < layers;
            for o in 0..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut z = b[o];
                for (wi, ai) in row.iter().zip(a.iter()) {
                    z += wi * ai;
                }
                out.push(if hidden { z.max(0.0) } else { z });
            }
            offset += (fan_in + 1) * fan_out;
        }
        Ok(())
    }

    /// Accumulates `scale * d(cotangent . output)/d(params)` into `grad`,
    /// using the activations of the latest `forward_tape` call.
    pub fn backward(&self, tape: &Tape, cotangent: &[f64], scale: f64, grad: &mut [f64]) {
        let layers = self.widths.len();
        debug_assert_eq!(cotangent.len(), self.output_dim());
        debug_assert_eq!(grad.len(), self.params.len());
        let mut delta: Vec<f64> = cotangent.iter().map(|c| c * scale).collect();
        let mut offset = self.params.len();
        for k in (0..layers - 1).rev() {
            let (fan_in, fan_out) = (self.widths[k], self.widths[k + 1]);
            offset -= (fan_in + 1) * fan_out;
            let a = &tape.acts[k];
            let w = &self.params[offset..offset + fan_in * fan_out];
            {
                let (gw, gb) =
                    grad[offset..offset + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
                for o in 0..fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, ai) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(a.iter()) {
                        *g += d * ai;
                    }
                }
            }
            if k == 0 {
                break;
            }
            let mut next = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (n, wi) in next.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *n += d * wi;
                }
            }
            // ReLU derivative at the hidden layer feeding this one.
            for (n, ai) in next.iter_mut().zip(a.iter()) {
                if *ai <= 0.0 {
                    *n = 0.0;
                }
            }
            delta = next;
        }
    }
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Descent step: `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    /// Ascent step on an objective whose gradient is `grads`.
    pub fn ascend(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        let neg: Vec<f64> = grads.iter().map(|g| -g).collect();
        self.step(params, &neg, lr);
    }
}
