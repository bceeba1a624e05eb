//! Twist functions `ψ(s_{1:t})`: the learned MLP twist, the constant twist,
//! and the exact optimal twist obtained by enumeration.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::math::log_sum_exp;
use crate::mlp::{Activation, Mlp, Optimizer, OptimizerKind, WindowFeatures};
use crate::oracle::{decode_prefix, PrefixTables};
use crate::persist::{FlatFile, Header};
use crate::potential::SequencePotential;
use crate::rng::{stream_rng, Stream};
use crate::seqmodel::{AutoregressiveModel, Prompt, TokenId};

/// A prefix scorer queried for all next tokens at once.
pub trait Twist: Sync {
    /// `log ψ(prefix ⊕ v)` for every token `v`.
    fn log_twist_all(&self, prompt: &Prompt, prefix: &[TokenId]) -> Vec<f64>;

    /// `log ψ(prefix)`; the empty prefix has `ψ = 1`.
    fn log_twist(&self, prompt: &Prompt, prefix: &[TokenId]) -> f64 {
        match prefix.split_last() {
            None => 0.0,
            Some((&last, parent)) => self.log_twist_all(prompt, parent)[last],
        }
    }
}

/// `ψ ≡ 1`: the twist-induced proposal is the base model itself.
#[derive(Debug, Clone, Copy)]
pub struct UnitTwist {
    pub vocab: usize,
}

impl Twist for UnitTwist {
    fn log_twist_all(&self, _prompt: &Prompt, _prefix: &[TokenId]) -> Vec<f64> {
        vec![0.0; self.vocab]
    }
}

/// Shared MLP twist. Output `v` at the features of `s_{1:t-1}` is
/// `log ψ_θ(s_{1:t-1} ⊕ v)`; the position feature shares it across `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwistNetwork {
    features: WindowFeatures,
    mlp: Mlp,
    generation: u32,
}

impl TwistNetwork {
    /// Hidden weights uniform in [-0.1, 0.1], zero output head: `ψ ≡ 1` at start.
    pub fn new(vocab: usize, window: usize, horizon: usize, hidden: usize, seed: u64) -> Result<Self> {
        if window == 0 || hidden == 0 || vocab < 2 || horizon == 0 {
            return Err(Error::domain("twist needs window, hidden width and horizon >= 1"));
        }
        let features = WindowFeatures { vocab, window, horizon };
        let mut rng = stream_rng(seed, Stream::Init, 2, 0);
        Ok(Self {
            features,
            mlp: Mlp::new(features.dim(), hidden, vocab, 0.1, &mut rng),
            generation: 0,
        })
    }

    pub fn features(&self) -> WindowFeatures {
        self.features
    }
    pub fn generation(&self) -> u32 {
        self.generation
    }
    pub fn with_generation(mut self, m: u32) -> Self {
        self.generation = m;
        self
    }
    pub fn params(&self) -> &[f64] {
        self.mlp.params()
    }
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.mlp.params_mut()
    }
    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }
    pub fn hidden(&self) -> usize {
        self.mlp.hidden_dim()
    }

    pub(crate) fn forward(&self, prompt: &Prompt, prefix: &[TokenId]) -> (Vec<usize>, Activation) {
        let active = self.features.active(&prompt.tokens, prefix);
        let act = self.mlp.forward(&active);
        (active, act)
    }

    /// `log ψ_θ(prefix ⊕ token)` through a separate scalar path (one output
    /// row instead of the whole head); used to cross-check [`Twist::log_twist_all`].
    pub fn log_twist_single(&self, prompt: &Prompt, prefix: &[TokenId], token: TokenId) -> f64 {
        let active = self.features.active(&prompt.tokens, prefix);
        let (i, h, o) = (self.mlp.input_dim(), self.mlp.hidden_dim(), self.mlp.output_dim());
        let p = self.mlp.params();
        let b1 = i * h;
        let w2 = b1 + h;
        let b2 = w2 + o * h;
        let ws = b2 + o;
        let mut out = p[b2 + token];
        for j in 0..h {
            let pre = p[b1 + j] + active.iter().map(|&a| p[a * h + j]).sum::<f64>();
            out += p[w2 + token * h + j] * pre.tanh();
        }
        out + active.iter().map(|&a| p[ws + a * o + token]).sum::<f64>()
    }

    /// `grad += coef · ∇_θ log ψ_θ(prefix ⊕ token)`.
    pub fn accumulate_grad_log_twist(&self, prompt: &Prompt, prefix: &[TokenId], token: TokenId, coef: f64, grad: &mut [f64]) {
        if coef == 0.0 {
            return;
        }
        let (active, act) = self.forward(prompt, prefix);
        let mut d_out = vec![0.0; self.features.vocab];
        d_out[token] = coef;
        self.mlp.backward(&active, &act, &d_out, grad);
    }

    /// Like [`Self::accumulate_grad_log_twist`] but with one coefficient per
    /// next token, sharing a single forward pass.
    pub fn accumulate_grad_all(&self, prompt: &Prompt, prefix: &[TokenId], coefs: &[f64], grad: &mut [f64]) {
        if coefs.iter().all(|&c| c == 0.0) {
            return;
        }
        let (active, act) = self.forward(prompt, prefix);
        self.mlp.backward(&active, &act, coefs, grad);
    }

    /// Least-squares regression of the network onto a twist table over every
    /// prefix; returns the final mean squared error.
    pub fn regress_onto(&mut self, table: &TwistTable, prompt: &Prompt, steps: usize, lr: f64) -> f64 {
        let v = self.features.vocab;
        let mut samples: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
        for t in 0..table.horizon {
            for code in 0..v.pow(t as u32) {
                let prefix = decode_prefix(code, t, v);
                let active = self.features.active(&prompt.tokens, &prefix);
                samples.push((active, table.levels[t + 1][code * v..(code + 1) * v].to_vec()));
            }
        }
        let n = (samples.len() * v) as f64;
        let mut opt = Optimizer::new(OptimizerKind::Adam, lr, self.mlp.param_count());
        let mut mse = f64::INFINITY;
        for _ in 0..steps {
            let mut grad = vec![0.0; self.mlp.param_count()];
            mse = 0.0;
            for (active, target) in &samples {
                let act = self.mlp.forward(active);
                let d: Vec<f64> = act.output.iter().zip(target).map(|(o, y)| 2.0 * (o - y) / n).collect();
                mse += act.output.iter().zip(target).map(|(o, y)| (o - y).powi(2)).sum::<f64>() / n;
                self.mlp.backward(active, &act, &d, &mut grad);
            }
            opt.step(self.mlp.params_mut(), &grad);
        }
        mse
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let mut h = Header::new();
        h.push("vocab", self.features.vocab);
        h.push("order", self.features.window);
        h.push("generation", self.generation);
        h.push("horizon", self.features.horizon);
        h.push("hidden", self.mlp.hidden_dim());
        FlatFile::new("twist", h, self.mlp.params().to_vec()).write(w)
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self> {
        let file = FlatFile::read(r)?;
        if file.kind != "twist" {
            return Err(Error::Parse(format!("expected a twist file, found kind {:?}", file.kind)));
        }
        let h = &file.header;
        let features = WindowFeatures {
            vocab: h.parse("vocab")?,
            window: h.parse("order")?,
            horizon: h.parse("horizon")?,
        };
        let hidden: usize = h.parse("hidden")?;
        let mlp = Mlp::from_params(features.dim(), hidden, features.vocab, file.params)
            .ok_or_else(|| Error::Parse("twist parameter count mismatch".into()))?;
        Ok(Self {
            features,
            mlp,
            generation: h.parse("generation")?,
        })
    }
}

impl Twist for TwistNetwork {
    fn log_twist_all(&self, prompt: &Prompt, prefix: &[TokenId]) -> Vec<f64> {
        self.forward(prompt, prefix).1.output
    }
}

/// Exact twist values for every prefix of one prompt.
///
/// `levels[t][code]` is `log ψ(s_{1:t})` where `code` reads `s_{1:t}` as a
/// base-`vocab` number; `levels[0] = [log Z]` and `levels[T]` is `log φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwistTable {
    pub vocab: usize,
    pub horizon: usize,
    pub levels: Vec<Vec<f64>>,
}

impl TwistTable {
    pub fn log_value(&self, prefix: &[TokenId]) -> f64 {
        let code = prefix.iter().fold(0, |acc, &t| acc * self.vocab + t);
        self.levels[prefix.len()][code]
    }
}

impl Twist for TwistTable {
    fn log_twist_all(&self, _prompt: &Prompt, prefix: &[TokenId]) -> Vec<f64> {
        let code = prefix.iter().fold(0, |acc, &t| acc * self.vocab + t);
        let v = self.vocab;
        self.levels[prefix.len() + 1][code * v..(code + 1) * v].to_vec()
    }
}

/// `ψ*(s_{1:t}) = Σ_{s_{t+1:T}} p(s_{t+1:T} | s_{1:t}) φ(s_{1:T})`, the
/// expected future potential, by backward recursion over all prefixes.
pub fn optimal_twist_table(model: &AutoregressiveModel, pot: &dyn SequencePotential, prompt: &Prompt) -> Result<TwistTable> {
    let tables = PrefixTables::build(model, prompt)?;
    let v = tables.vocab;
    let horizon = prompt.horizon;
    let mut levels: Vec<Vec<f64>> = vec![Vec::new(); horizon + 1];
    levels[horizon] = tables.leaf_log_potentials(pot, prompt);
    for t in (0..horizon).rev() {
        let cond = &tables.cond[t];
        let next = &levels[t + 1];
        levels[t] = (0..v.pow(t as u32))
            .map(|c| {
                let terms: Vec<f64> = (0..v).map(|u| cond[c * v + u] + next[c * v + u]).collect();
                log_sum_exp(&terms)
            })
            .collect();
    }
    Ok(TwistTable { vocab: v, horizon, levels })
}
