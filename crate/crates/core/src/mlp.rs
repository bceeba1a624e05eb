//! One-hidden-layer MLP over sparse one-hot features, with hand-written
//! backpropagation, plus the optimizers used to train it.
//!
//! Both the neural language model and the twist network are this MLP applied
//! to [`WindowFeatures`]: the last `window` context tokens (padded with a
//! start symbol) and the position of the token being predicted.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::StreamRng;
use crate::seqmodel::TokenId;

/// Maps a context to the indices of its active (value 1) one-hot features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowFeatures {
    pub vocab: usize,
    pub window: usize,
    pub horizon: usize,
}

impl WindowFeatures {
    pub fn dim(&self) -> usize {
        self.window * (self.vocab + 1) + self.horizon
    }

    /// Active features for predicting token `prefix.len() + 1`.
    ///
    /// Slot `j` holds the token `j + 1` places back in `prompt ⊕ prefix`, or
    /// the start symbol (`vocab`) when the context is shorter than the window.
    pub fn active(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Vec<usize> {
        debug_assert!(prefix.len() < self.horizon);
        let stride = self.vocab + 1;
        let mut out = Vec::with_capacity(self.window + 1);
        let total = prompt.len() + prefix.len();
        for j in 0..self.window {
            let tok = if j < total {
                let pos = total - 1 - j;
                if pos >= prompt.len() {
                    prefix[pos - prompt.len()]
                } else {
                    prompt[pos]
                }
            } else {
                self.vocab
            };
            out.push(j * stride + tok);
        }
        out.push(self.window * stride + prefix.len());
        out
    }
}

/// Forward-pass cache needed by backpropagation.
#[derive(Debug, Clone)]
pub struct Activation {
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

/// `out = W2 tanh(W1 x + b1) + b2 + Ws x` for a binary input `x`.
///
/// The linear skip path `Ws` lets the network express an n-gram table
/// exactly, which is how a tabular base model is imported as a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    input: usize,
    hidden: usize,
    output: usize,
    params: Vec<f64>,
}

impl Mlp {
    /// Hidden weights uniform in `[-init_scale, init_scale]`; biases, output
    /// head and skip path zero, so every output starts at exactly 0.
    pub fn new(input: usize, hidden: usize, output: usize, init_scale: f64, rng: &mut StreamRng) -> Self {
        let mut mlp = Self::zeros(input, hidden, output);
        if init_scale > 0.0 {
            for w in &mut mlp.params[..input * hidden] {
                *w = rng.random_range(-init_scale..=init_scale);
            }
        }
        mlp
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        let n = Self::param_count_for(input, hidden, output);
        Self {
            input,
            hidden,
            output,
            params: vec![0.0; n],
        }
    }

    pub fn from_params(input: usize, hidden: usize, output: usize, params: Vec<f64>) -> Option<Self> {
        (params.len() == Self::param_count_for(input, hidden, output)).then_some(Self {
            input,
            hidden,
            output,
            params,
        })
    }

    pub fn param_count_for(input: usize, hidden: usize, output: usize) -> usize {
        input * hidden + hidden + output * hidden + output + input * output
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }
    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }
    pub fn output_dim(&self) -> usize {
        self.output
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn offsets(&self) -> (usize, usize, usize, usize) {
        let b1 = self.input * self.hidden;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.output * self.hidden;
        let ws = b2 + self.output;
        (b1, w2, b2, ws)
    }

    /// Mask of parameters that are weights (true) rather than biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let (b1, w2, b2, ws) = self.offsets();
        (0..self.params.len())
            .map(|i| !((b1..w2).contains(&i) || (b2..ws).contains(&i)))
            .collect()
    }

    /// Mutable view of the skip path `Ws[i * output + v]`.
    pub fn skip_mut(&mut self) -> &mut [f64] {
        let (_, _, _, ws) = self.offsets();
        &mut self.params[ws..]
    }

    pub fn forward(&self, active: &[usize]) -> Activation {
        let (b1, w2, b2, ws) = self.offsets();
        let p = &self.params;
        let mut hidden = p[b1..b1 + self.hidden].to_vec();
        for &i in active {
            let col = &p[i * self.hidden..(i + 1) * self.hidden];
            for (h, w) in hidden.iter_mut().zip(col) {
                *h += w;
            }
        }
        for h in hidden.iter_mut() {
            *h = h.tanh();
        }
        let mut output = p[b2..b2 + self.output].to_vec();
        for (v, o) in output.iter_mut().enumerate() {
            let row = &p[w2 + v * self.hidden..w2 + (v + 1) * self.hidden];
            *o += row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>();
        }
        for &i in active {
            let row = &p[ws + i * self.output..ws + (i + 1) * self.output];
            for (o, w) in output.iter_mut().zip(row) {
                *o += w;
            }
        }
        Activation { hidden, output }
    }

    /// `grad += J^T d_out`, where `J` is the Jacobian of the outputs w.r.t.
    /// the parameters at this input.
    pub fn backward(&self, active: &[usize], act: &Activation, d_out: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let (b1, w2, b2, ws) = self.offsets();
        let p = &self.params;
        let mut d_pre = vec![0.0; self.hidden];
        for (v, &d) in d_out.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad[b2 + v] += d;
            let off = w2 + v * self.hidden;
            for j in 0..self.hidden {
                grad[off + j] += d * act.hidden[j];
                d_pre[j] += d * p[off + j];
            }
            for &i in active {
                grad[ws + i * self.output + v] += d;
            }
        }
        for (dp, h) in d_pre.iter_mut().zip(&act.hidden) {
            *dp *= 1.0 - h * h;
        }
        for (g, dp) in grad[b1..b1 + self.hidden].iter_mut().zip(&d_pre) {
            *g += dp;
        }
        for &i in active {
            for (g, dp) in grad[i * self.hidden..(i + 1) * self.hidden].iter_mut().zip(&d_pre) {
                *g += dp;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Plain SGD or Adam with decoupled weight decay. Always minimizes.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    decay_mask: Option<Vec<bool>>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decay_mask: None,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// Decoupled decay applied only where `mask` is true.
    pub fn with_weight_decay(mut self, weight_decay: f64, mask: Vec<bool>) -> Self {
        self.weight_decay = weight_decay;
        self.decay_mask = Some(mask);
        self
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        if self.weight_decay > 0.0 {
            let decay = 1.0 - self.lr * self.weight_decay;
            for (i, p) in params.iter_mut().enumerate() {
                if self.decay_mask.as_ref().is_none_or(|m| m[i]) {
                    *p *= decay;
                }
            }
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
    }
}
