//! Contrastive twist learning.
//!
//! The ascent direction for the twist parameters is
//!
//! ```text
//! Σ_t  E_σ[∇ log ψ_θ(s_{1:t})]  −  E_{π_t,θ}[∇ log ψ_θ(s_{1:t})]
//! ```
//!
//! The first expectation uses self-normalized importance weights on i.i.d.
//! draws from the twist-induced proposal (positives). The second uses one
//! shared set of proposal trajectories whose prefix weights at step `t` are
//! the running products of incremental weights (negatives, no resampling).

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{effective_sample_size, normalize_log_weights};
use crate::mlp::{Optimizer, OptimizerKind};
use crate::potential::SequencePotential;
use crate::rng::{derive_seed, Stream};
use crate::seqmodel::{AutoregressiveModel, Prompt, TokenId};
use crate::smc::{tsmc_sample, ParticleSystem, SmcConfig, Terminal};
use crate::twist::{Twist, TwistNetwork};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtlConfig {
    #[serde(default = "default_k")]
    pub k_pos: usize,
    #[serde(default = "default_k")]
    pub k_neg: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub weight_decay: f64,
    /// Draw positives from full TSMC with resampling instead of i.i.d. SIS.
    #[serde(default)]
    pub resampled_positives: bool,
    #[serde(default)]
    pub generation: u32,
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> usize {
    64
}
fn default_steps() -> usize {
    2000
}
fn default_lr() -> f64 {
    1e-3
}

impl Default for CtlConfig {
    fn default() -> Self {
        Self {
            k_pos: default_k(),
            k_neg: default_k(),
            steps: default_steps(),
            learning_rate: default_lr(),
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            resampled_positives: false,
            generation: 0,
            seed: 0,
        }
    }
}

/// Complete sequences with self-normalized weights for every prefix length.
#[derive(Debug, Clone)]
pub struct WeightedPrefixBatch {
    pub sequences: Vec<Vec<TokenId>>,
    /// `weights[t - 1][k]`: normalized weight of `s^k_{1:t}`.
    pub weights: Vec<Vec<f64>>,
    /// ESS of the weights at each `t`.
    pub ess: Vec<f64>,
}

impl WeightedPrefixBatch {
    /// Same weights at every prefix length, from unnormalized log-weights.
    pub fn shared(sequences: Vec<Vec<TokenId>>, log_weights: &[f64], horizon: usize) -> Result<Self> {
        let w = checked_normalize(log_weights, horizon)?;
        let ess = effective_sample_size(log_weights);
        Ok(Self {
            sequences,
            weights: vec![w; horizon],
            ess: vec![ess; horizon],
        })
    }

    /// Per-step weights from per-step unnormalized log-weights.
    pub fn per_step(sequences: Vec<Vec<TokenId>>, log_weights: &[Vec<f64>]) -> Result<Self> {
        let mut weights = Vec::with_capacity(log_weights.len());
        let mut ess = Vec::with_capacity(log_weights.len());
        for (t, lw) in log_weights.iter().enumerate() {
            weights.push(checked_normalize(lw, t + 1)?);
            ess.push(effective_sample_size(lw));
        }
        Ok(Self {
            sequences,
            weights,
            ess,
        })
    }

    pub fn horizon(&self) -> usize {
        self.weights.len()
    }

    /// `Σ_k ŵ^k f(s^k)` using the final-step weights.
    pub fn weighted_mean<F: Fn(&[TokenId]) -> f64>(&self, f: F) -> f64 {
        let w = self.weights.last().expect("non-empty batch");
        self.sequences.iter().zip(w).map(|(s, w)| w * f(s)).sum()
    }
}

fn checked_normalize(log_w: &[f64], step: usize) -> Result<Vec<f64>> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Degeneracy {
            step,
            particles: log_w.len(),
            max_log_weight: max,
        });
    }
    Ok(normalize_log_weights(log_w))
}

/// Sequential importance sampling from the twist-induced proposal; returns
/// the paths and the accumulated log-weight after every step.
fn sis_paths(
    model: &AutoregressiveModel,
    twist: &dyn Twist,
    terminal: Terminal<'_>,
    prompt: &Prompt,
    k: usize,
    seed: u64,
) -> (ParticleSystem, Vec<Vec<f64>>) {
    let mut ps = ParticleSystem::new(k);
    let mut per_step = Vec::with_capacity(prompt.horizon);
    for t in 1..=prompt.horizon {
        ps.extend(model, twist, terminal, prompt, t, seed);
        for (a, w) in ps.log_weights.iter_mut().zip(&ps.incremental) {
            *a += w;
        }
        per_step.push(ps.log_weights.clone());
    }
    (ps, per_step)
}

/// Positives: `s^k ~ q(s_{1:T})` i.i.d., weighted by `p^(m)(s) φ^(m)(s) / q(s)`.
pub fn positive_batch(
    model: &AutoregressiveModel,
    twist: &dyn Twist,
    terminal: &dyn SequencePotential,
    prompt: &Prompt,
    k: usize,
    seed: u64,
) -> Result<WeightedPrefixBatch> {
    if k == 0 {
        return Err(Error::domain("positive batch needs at least one particle"));
    }
    let (seqs, log_q) = sample_proposal(model, twist, terminal, prompt, k, seed);
    let log_w: Vec<f64> = seqs
        .par_iter()
        .zip(log_q.par_iter())
        .map(|(s, lq)| model.prefix_logprob_unchecked(&prompt.tokens, s) + terminal.log_score(prompt, s) - lq)
        .collect();
    WeightedPrefixBatch::shared(seqs, &log_w, prompt.horizon)
}

/// `k` i.i.d. complete sequences from the twist-induced proposal (final step
/// guided by `terminal`) with their proposal log-probabilities `log q(s)`.
pub fn sample_proposal(
    model: &AutoregressiveModel,
    twist: &dyn Twist,
    terminal: &dyn SequencePotential,
    prompt: &Prompt,
    k: usize,
    seed: u64,
) -> (Vec<Vec<TokenId>>, Vec<f64>) {
    let (ps, _) = sis_paths(model, twist, Terminal::Potential(terminal), prompt, k, seed);
    (ps.particles, ps.log_proposal)
}

/// Positives taken as the equally weighted output of a resampling TSMC run.
pub fn resampled_positive_batch(
    model: &AutoregressiveModel,
    twist: &dyn Twist,
    terminal: &dyn SequencePotential,
    prompt: &Prompt,
    k: usize,
    seed: u64,
) -> Result<WeightedPrefixBatch> {
    let out = tsmc_sample(model, twist, terminal, prompt, k, &SmcConfig::default(), seed)?;
    let seqs = out.sequences.into_iter().map(|s| s.0).collect();
    WeightedPrefixBatch::shared(seqs, &out.log_weights, prompt.horizon)
}

/// Negatives: one set of proposal paths (twist guidance at every step,
/// including `T`); the weight of `s^k_{1:t}` is `Π_{τ<=t} w_τ^k`.
pub fn negative_batch(
    model: &AutoregressiveModel,
    twist: &dyn Twist,
    prompt: &Prompt,
    k: usize,
    seed: u64,
) -> Result<WeightedPrefixBatch> {
    if k == 0 {
        return Err(Error::domain("negative batch needs at least one particle"));
    }
    let (ps, per_step) = sis_paths(model, twist, Terminal::Twist, prompt, k, seed);
    WeightedPrefixBatch::per_step(ps.particles, &per_step)
}

#[derive(Debug, Clone)]
pub struct CtlGradient {
    /// Ascent direction (the negative loss gradient).
    pub grad: Vec<f64>,
    /// `Σ_t (weighted positive mean − weighted negative mean) of log ψ`.
    pub proxy_loss: f64,
}

const GRAD_CHUNK: usize = 64;

/// Assembles `Σ_t Σ_k ŵ_pos ∇log ψ(s_{1:t}^pos) − Σ_k ŵ_neg^t ∇log ψ(s_{1:t}^neg)`.
///
/// Identical prefixes are merged first; partial sums over fixed-size chunks
/// are added in a fixed order, so the result does not depend on thread count.
pub fn ctl_gradient(
    twist: &TwistNetwork,
    prompt: &Prompt,
    positive: &WeightedPrefixBatch,
    negative: &WeightedPrefixBatch,
) -> CtlGradient {
    let vocab = twist.features().vocab;
    let mut coefs: BTreeMap<&[TokenId], Vec<f64>> = BTreeMap::new();
    for (batch, sign) in [(positive, 1.0), (negative, -1.0)] {
        for (t, w) in batch.weights.iter().enumerate() {
            for (s, &wk) in batch.sequences.iter().zip(w) {
                if wk == 0.0 {
                    continue;
                }
                coefs.entry(&s[..t]).or_insert_with(|| vec![0.0; vocab])[s[t]] += sign * wk;
            }
        }
    }
    let entries: Vec<(&[TokenId], Vec<f64>)> = coefs.into_iter().collect();
    let partials: Vec<(Vec<f64>, f64)> = entries
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; twist.param_count()];
            let mut proxy = 0.0;
            for (prefix, c) in chunk {
                let out = twist.log_twist_all(prompt, prefix);
                proxy += c.iter().zip(&out).map(|(a, b)| a * b).sum::<f64>();
                twist.accumulate_grad_all(prompt, prefix, c, &mut g);
            }
            (g, proxy)
        })
        .collect();
    let mut grad = vec![0.0; twist.param_count()];
    let mut proxy_loss = 0.0;
    for (g, p) in partials {
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
        proxy_loss += p;
    }
    CtlGradient { grad, proxy_loss }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtlTraceRow {
    pub step: usize,
    pub ess_pos: f64,
    pub ess_neg_mean: f64,
    pub proxy_loss: f64,
    pub grad_norm: f64,
}

pub fn write_trace_jsonl<W: Write, T: Serialize>(rows: &[T], mut w: W) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(w)?;
    }
    Ok(())
}

/// Trains `twist` in place for `config.steps` ascent steps on fresh batches.
pub fn train_twist(
    model: &AutoregressiveModel,
    terminal: &dyn SequencePotential,
    prompt: &Prompt,
    twist: &mut TwistNetwork,
    config: &CtlConfig,
) -> Result<Vec<CtlTraceRow>> {
    train_twist_with(model, terminal, prompt, twist, config, |_, _| {})
}

/// [`train_twist`] with a callback invoked after every step.
pub fn train_twist_with<F: FnMut(usize, &TwistNetwork)>(
    model: &AutoregressiveModel,
    terminal: &dyn SequencePotential,
    prompt: &Prompt,
    twist: &mut TwistNetwork,
    config: &CtlConfig,
    mut on_step: F,
) -> Result<Vec<CtlTraceRow>> {
    if config.steps == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::Config("CTL needs steps >= 1 and a positive learning rate".into()));
    }
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, twist.param_count());
    if config.weight_decay > 0.0 {
        opt = opt.with_weight_decay(config.weight_decay, vec![true; twist.param_count()]);
    }
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let base = derive_seed(config.seed, Stream::Ctl, u64::from(config.generation) << 32 | step as u64);
        let pos_seed = derive_seed(base, Stream::Ctl, 0);
        let neg_seed = derive_seed(base, Stream::Ctl, 1);
        let pos = if config.resampled_positives {
            resampled_positive_batch(model, twist, terminal, prompt, config.k_pos, pos_seed)?
        } else {
            positive_batch(model, twist, terminal, prompt, config.k_pos, pos_seed)?
        };
        let neg = negative_batch(model, twist, prompt, config.k_neg, neg_seed)?;
        let g = ctl_gradient(twist, prompt, &pos, &neg);
        let descent: Vec<f64> = g.grad.iter().map(|x| -x).collect();
        opt.step(twist.params_mut(), &descent);
        trace.push(CtlTraceRow {
            step,
            ess_pos: pos.ess[0],
            ess_neg_mean: neg.ess.iter().sum::<f64>() / neg.ess.len() as f64,
            proxy_loss: g.proxy_loss,
            grad_norm: g.grad.iter().map(|x| x * x).sum::<f64>().sqrt(),
        });
        on_step(step, twist);
    }
    Ok(trace)
}
