//! Twisted sequential Monte Carlo over token sequences.
//!
//! Each step extends every particle with a token drawn from the
//! twist-induced proposal `q_t(v) ∝ p(v | s_{0:t-1}) ψ(s_{1:t-1} ⊕ v)`,
//! reweights it by `Σ_v p(v | ·) ψ(· ⊕ v) / ψ(s_{1:t-1})` (which depends only
//! on the parent prefix), and resamples. At `t = T` the potential replaces
//! the twist, so the last step is exact.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{categorical_from_uniform, log_sum_exp, normalize_log_weights};
use crate::potential::SequencePotential;
use crate::rng::{derive_seed, stream_rng, Stream, StreamRng};
use crate::seqmodel::{AutoregressiveModel, Prompt, Sequence, TokenId};
use crate::twist::Twist;

/// What guides the final extension `s_T`.
#[derive(Clone, Copy)]
pub enum Terminal<'a> {
    /// `q_T ∝ p · φ`: the sampler's final step.
    Potential(&'a dyn SequencePotential),
    /// `q_T ∝ p · ψ_θ`: pure twisted targets, used for CTL negatives.
    Twist,
}

/// Next-token proposal at one prefix.
#[derive(Debug, Clone)]
pub struct Proposal {
    /// `log q(v)`, normalized.
    pub log_q: Vec<f64>,
    /// `log Σ_v p(v | prefix) g(prefix ⊕ v)`, via max-shifted log-sum-exp.
    pub log_normalizer: f64,
    /// `log g(prefix ⊕ v)`: twist values, or potential values at the last step.
    pub log_guide: Vec<f64>,
}

pub fn propose_next(
    model: &AutoregressiveModel,
    twist: &dyn Twist,
    terminal: Terminal<'_>,
    prompt: &Prompt,
    prefix: &[TokenId],
) -> Proposal {
    let cond = model.next_token_logprobs_unchecked(&prompt.tokens, prefix);
    let log_guide = match terminal {
        Terminal::Potential(pot) if prefix.len() + 1 == prompt.horizon => {
            pot.log_score_extensions(prompt, prefix, cond.len())
        }
        _ => twist.log_twist_all(prompt, prefix),
    };
    let target: Vec<f64> = cond.iter().zip(&log_guide).map(|(a, b)| a + b).collect();
    let log_normalizer = log_sum_exp(&target);
    let log_q = target.iter().map(|x| x - log_normalizer).collect();
    Proposal {
        log_q,
        log_normalizer,
        log_guide,
    }
}

/// Incremental log-weight for a particle whose prefix now has `t` tokens:
/// `log Σ_v p(v | s_{0:t-1}) g(s_{1:t-1} ⊕ v) − log ψ(s_{1:t-1})`, with
/// `ψ(empty) = 1`. Independent of the sampled token `s_t`.
pub fn incremental_log_weight(
    model: &AutoregressiveModel,
    twist: &dyn Twist,
    terminal: Terminal<'_>,
    prompt: &Prompt,
    prefix: &[TokenId],
) -> Result<f64> {
    if prefix.is_empty() || prefix.len() > prompt.horizon {
        return Err(Error::domain("incremental weight needs 1 <= t <= T"));
    }
    model.vocab().check(prefix)?;
    let parent = &prefix[..prefix.len() - 1];
    let prop = propose_next(model, twist, terminal, prompt, parent);
    Ok(prop.log_normalizer - twist.log_twist(prompt, parent))
}

/// `(Σ w)^2 / Σ w^2` for log-weights; lies in `[1, K]`.
pub fn effective_sample_size(log_weights: &[f64]) -> f64 {
    crate::math::effective_sample_size(log_weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ResamplingScheme {
    #[default]
    Multinomial,
    Systematic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmcConfig {
    #[serde(default)]
    pub scheme: ResamplingScheme,
    /// Resample only when ESS falls below this fraction of K. `None`
    /// resamples at every step.
    #[serde(default)]
    pub ess_threshold: Option<f64>,
    /// Skip resampling entirely (sequential importance sampling).
    #[serde(default)]
    pub disable_resampling: bool,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self {
            scheme: ResamplingScheme::Multinomial,
            ess_threshold: None,
            disable_resampling: false,
        }
    }
}

/// Ancestor indices drawn from normalized `log_weights`.
pub fn resample<R: Rng + ?Sized>(log_weights: &[f64], scheme: ResamplingScheme, rng: &mut R) -> Result<Vec<usize>> {
    let k = log_weights.len();
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Degeneracy {
            step: 0,
            particles: k,
            max_log_weight: max,
        });
    }
    let w = normalize_log_weights(log_weights);
    let mut cdf = Vec::with_capacity(k);
    let mut acc = 0.0;
    for x in &w {
        acc += x;
        cdf.push(acc);
    }
    let pick = |u: f64| cdf.partition_point(|&c| c <= u * acc).min(k - 1);
    Ok(match scheme {
        ResamplingScheme::Multinomial => (0..k).map(|_| pick(rng.random::<f64>())).collect(),
        ResamplingScheme::Systematic => {
            let u0 = rng.random::<f64>();
            (0..k).map(|i| pick((i as f64 + u0) / k as f64)).collect()
        }
    })
}

/// One row of the per-step diagnostic trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    pub ess: f64,
    pub log_normalizer_increment: f64,
    pub unique_ancestors: usize,
    pub resampled: bool,
}

/// K prefixes of equal length with their weights and ancestry.
#[derive(Debug, Clone)]
pub struct ParticleSystem {
    pub particles: Vec<Vec<TokenId>>,
    /// Accumulated log-weights since the last resampling.
    pub log_weights: Vec<f64>,
    /// Incremental log-weights `w_t^k` of the latest step.
    pub incremental: Vec<f64>,
    /// `log ψ(s_{1:t}^k)` for each current prefix.
    pub log_twist: Vec<f64>,
    /// Sum of `log q_t` along each particle's path.
    pub log_proposal: Vec<f64>,
    /// Ancestor indices chosen at each resampling step.
    pub ancestry: Vec<Vec<usize>>,
    pub log_z: f64,
}

impl ParticleSystem {
    pub fn new(k: usize) -> Self {
        Self {
            particles: vec![Vec::new(); k],
            log_weights: vec![0.0; k],
            incremental: vec![0.0; k],
            log_twist: vec![0.0; k],
            log_proposal: vec![0.0; k],
            ancestry: Vec::new(),
            log_z: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Extending and reweighting for step `t` (1-based). Each particle draws
    /// from its own `(seed, step, particle)` stream.
    pub fn extend(
        &mut self,
        model: &AutoregressiveModel,
        twist: &dyn Twist,
        terminal: Terminal<'_>,
        prompt: &Prompt,
        t: usize,
        seed: u64,
    ) {
        let steps: Vec<(f64, TokenId, f64, f64)> = self
            .particles
            .par_iter()
            .zip(self.log_twist.par_iter())
            .enumerate()
            .map(|(k, (prefix, &lt))| {
                let prop = propose_next(model, twist, terminal, prompt, prefix);
                let mut rng = stream_rng(seed, Stream::Extend, t as u64, k as u64);
                let probs: Vec<f64> = prop.log_q.iter().map(|l| l.exp()).collect();
                let total: f64 = probs.iter().sum();
                let tok = categorical_from_uniform(&probs, rng.random::<f64>() * total);
                (prop.log_normalizer - lt, tok, prop.log_q[tok], prop.log_guide[tok])
            })
            .collect();
        for (k, (w, tok, lq, lg)) in steps.into_iter().enumerate() {
            self.incremental[k] = w;
            self.particles[k].push(tok);
            self.log_proposal[k] += lq;
            self.log_twist[k] = lg;
        }
    }

    /// Folds the incremental weights into the accumulated ones, updates the
    /// normalizer estimate, and resamples if the policy asks for it.
    pub fn reweight_and_resample(&mut self, config: &SmcConfig, t: usize, rng: &mut StreamRng) -> Result<StepTrace> {
        let k = self.len();
        let prev = log_sum_exp(&self.log_weights);
        for (a, w) in self.log_weights.iter_mut().zip(&self.incremental) {
            *a += w;
        }
        let max = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Degeneracy {
                step: t,
                particles: k,
                max_log_weight: max,
            });
        }
        let inc = log_sum_exp(&self.log_weights) - prev;
        self.log_z += inc;
        let ess = effective_sample_size(&self.log_weights);
        let wants = !config.disable_resampling && config.ess_threshold.is_none_or(|f| ess < f * k as f64);
        let mut unique = k;
        if wants {
            let anc = resample(&self.log_weights, config.scheme, rng)?;
            let mut seen = vec![false; k];
            anc.iter().for_each(|&a| seen[a] = true);
            unique = seen.iter().filter(|&&s| s).count();
            self.particles = anc.iter().map(|&a| self.particles[a].clone()).collect();
            self.log_twist = anc.iter().map(|&a| self.log_twist[a]).collect();
            self.log_proposal = anc.iter().map(|&a| self.log_proposal[a]).collect();
            self.incremental = anc.iter().map(|&a| self.incremental[a]).collect();
            self.log_weights = vec![0.0; k];
            self.ancestry.push(anc);
        }
        Ok(StepTrace {
            t,
            ess,
            log_normalizer_increment: inc,
            unique_ancestors: unique,
            resampled: wants,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TsmcOutput {
    pub sequences: Vec<Sequence>,
    /// Final accumulated log-weights (all zero after a final resampling).
    pub log_weights: Vec<f64>,
    pub log_proposal: Vec<f64>,
    pub log_z: f64,
    pub trace: Vec<StepTrace>,
}

impl TsmcOutput {
    pub fn ess_trace(&self) -> Vec<f64> {
        self.trace.iter().map(|s| s.ess).collect()
    }

    /// Writes the step trace as JSON lines.
    pub fn write_trace_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for step in &self.trace {
            serde_json::to_writer(&mut w, step).map_err(|e| Error::Parse(e.to_string()))?;
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Runs extend → reweight → resample for `t = 1..=T` with `k` particles.
/// The final step is guided by `terminal` (φ, or φ^(m) in generation m).
#[allow(clippy::too_many_arguments)]
pub fn tsmc_sample(
    model: &AutoregressiveModel,
    twist: &dyn Twist,
    terminal: &dyn SequencePotential,
    prompt: &Prompt,
    k: usize,
    config: &SmcConfig,
    seed: u64,
) -> Result<TsmcOutput> {
    if k == 0 {
        return Err(Error::domain("need at least one particle"));
    }
    model.vocab().check(&prompt.tokens)?;
    let mut ps = ParticleSystem::new(k);
    let mut trace = Vec::with_capacity(prompt.horizon);
    let mut rng = stream_rng(seed, Stream::Resample, 0, 0);
    for t in 1..=prompt.horizon {
        ps.extend(model, twist, Terminal::Potential(terminal), prompt, t, seed);
        trace.push(ps.reweight_and_resample(config, t, &mut rng)?);
    }
    Ok(TsmcOutput {
        sequences: ps.particles.into_iter().map(Sequence).collect(),
        log_weights: ps.log_weights,
        log_proposal: ps.log_proposal,
        log_z: ps.log_z,
        trace,
    })
}

/// `runs` independent samplers with seeds derived from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn tsmc_runs(
    model: &AutoregressiveModel,
    twist: &dyn Twist,
    terminal: &dyn SequencePotential,
    prompt: &Prompt,
    k: usize,
    config: &SmcConfig,
    seed: u64,
    runs: usize,
) -> Result<Vec<TsmcOutput>> {
    (0..runs)
        .into_par_iter()
        .map(|r| tsmc_sample(model, twist, terminal, prompt, k, config, derive_seed(seed, Stream::Extend, r as u64)))
        .collect()
}
