//! Evaluation metrics and CSV emission.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctl::sample_proposal;
use crate::distill::GenerationRecord;
use crate::error::{Error, Result};
use crate::math::{format_sig, log_sum_exp, mean_std, mean_stderr};
use crate::oracle::{exact_ctl_loss, exact_kl_target_vs_proposal, ExactDistribution};
use crate::potential::{EffectivePotential, Potential, SequencePotential};
use crate::rng::{derive_seed, Stream};
use crate::seqmodel::{AutoregressiveModel, Prompt, Sequence, TokenId};
use crate::smc::{tsmc_runs, SmcConfig};
use crate::twist::Twist;

/// Mean classifier score `p(toxic | s)` at temperature 1.
pub fn toxicity_analog(pot: &Potential, seqs: &[Sequence]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::domain("toxicity of an empty sample"));
    }
    Ok(seqs.iter().map(|s| pot.classifier_prob(&s.0)).sum::<f64>() / seqs.len() as f64)
}

fn profile(seq: &[TokenId], vocab: usize) -> Vec<f64> {
    if seq.len() < 2 {
        let mut v = vec![0.0; vocab];
        seq.iter().for_each(|&t| v[t] += 1.0);
        return v;
    }
    let mut v = vec![0.0; vocab * vocab];
    for w in seq.windows(2) {
        v[w[0] * vocab + w[1]] += 1.0;
    }
    v
}

/// Mean cosine similarity over unordered pairs of bigram-count vectors
/// (unigram counts for length-1 sequences).
pub fn pairwise_similarity(seqs: &[Sequence], vocab: usize) -> Result<f64> {
    let n = seqs.len();
    if n < 2 {
        return Err(Error::domain("similarity needs at least two sequences"));
    }
    let dim = if seqs[0].len() < 2 { vocab } else { vocab * vocab };
    let mut sum = vec![0.0; dim];
    let mut self_dots = 0.0;
    for s in seqs {
        let p = profile(&s.0, vocab);
        if p.len() != dim {
            return Err(Error::domain("similarity needs sequences of equal length class"));
        }
        let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::domain("similarity of an empty sequence"));
        }
        for (a, b) in sum.iter_mut().zip(&p) {
            *a += b / norm;
        }
        self_dots += 1.0;
    }
    let total = sum.iter().map(|x| x * x).sum::<f64>();
    let nf = n as f64;
    Ok(((total - self_dots) / (nf * (nf - 1.0))).clamp(0.0, 1.0))
}

/// Cosine similarity of two sequences' bigram profiles.
pub fn cosine_similarity(a: &[TokenId], b: &[TokenId], vocab: usize) -> f64 {
    let (pa, pb) = (profile(a, vocab), profile(b, vocab));
    let dot: f64 = pa.iter().zip(&pb).map(|(x, y)| x * y).sum();
    let na = pa.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = pb.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub ess: f64,
    pub log_z: f64,
}

/// Self-normalized importance estimate of `D_KL(σ ‖ q^(m))` from `n` proposal
/// draws, with a delta-method standard error.
#[allow(clippy::too_many_arguments)]
pub fn estimate_kl_target_vs_proposal(
    model0: &AutoregressiveModel,
    pot: &Potential,
    twist: &dyn Twist,
    model_m: &AutoregressiveModel,
    prompt: &Prompt,
    n: usize,
    seed: u64,
) -> Result<KlEstimate> {
    if n < 2 {
        return Err(Error::domain("KL estimate needs at least two samples"));
    }
    let eff = EffectivePotential::new(pot, model0, model_m);
    let (seqs, log_q) = sample_proposal(model_m, twist, &eff, prompt, n, seed);
    let l: Vec<f64> = seqs
        .par_iter()
        .zip(log_q.par_iter())
        .map(|(s, lq)| model0.prefix_logprob_unchecked(&prompt.tokens, s) + pot.log_score(prompt, s) - lq)
        .collect();
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Degeneracy {
            step: prompt.horizon,
            particles: n,
            max_log_weight: max,
        });
    }
    let nf = n as f64;
    let lse = log_sum_exp(&l);
    // n · ŵ_k
    let nw: Vec<f64> = l.iter().map(|x| (x - lse).exp() * nf).collect();
    let mu = nw.iter().zip(&l).map(|(w, x)| w * x).sum::<f64>() / nf;
    let log_z = lse - nf.ln();
    let infl: Vec<f64> = nw.iter().zip(&l).map(|(w, x)| w * (x - mu) - (w - 1.0)).collect();
    let (_, se) = mean_stderr(&infl);
    let ess = nf * nf / nw.iter().map(|w| w * w).sum::<f64>();
    Ok(KlEstimate {
        estimate: mu - log_z,
        std_error: se,
        ess,
        log_z,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_k_test")]
    pub k_test: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_kl_samples")]
    pub kl_samples: usize,
    #[serde(default)]
    pub smc: SmcConfig,
}

fn default_k_test() -> usize {
    50
}
fn default_repeats() -> usize {
    20
}
fn default_kl_samples() -> usize {
    10_000
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_test: default_k_test(),
            repeats: default_repeats(),
            kl_samples: default_kl_samples(),
            smc: SmcConfig::default(),
        }
    }
}

/// Per-generation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub generation: u32,
    pub k_test: usize,
    pub mean_toxicity: f64,
    pub toxicity_stderr: f64,
    pub mean_similarity: f64,
    pub log_z_mean: f64,
    pub log_z_std: f64,
    pub kl_estimate: f64,
    pub kl_stderr: f64,
    pub exact_kl: Option<f64>,
    pub exact_ctl_loss: Option<f64>,
    pub target_toxicity: Option<f64>,
    pub acceptance_ratio: Option<f64>,
}

/// Shared evaluation context: base model, potential, prompt, and the exact
/// target when it is enumerable.
pub struct EvalContext<'a> {
    pub model0: &'a AutoregressiveModel,
    pub pot: &'a Potential,
    pub prompt: &'a Prompt,
    pub exact: Option<&'a ExactDistribution>,
}

impl EvalContext<'_> {
    pub fn target_toxicity(&self) -> Option<f64> {
        self.exact.map(|e| e.expectation(|s| self.pot.classifier_prob(s)))
    }
}

/// Runs `repeats` TSMC samplers with `k` particles and returns per-run
/// (mean toxicity, similarity, log Ẑ).
#[allow(clippy::too_many_arguments)]
fn run_stats(
    ctx: &EvalContext<'_>,
    model: &AutoregressiveModel,
    twist: &dyn Twist,
    k: usize,
    repeats: usize,
    smc: &SmcConfig,
    seed: u64,
) -> Result<Vec<(f64, Option<f64>, f64)>> {
    let eff = EffectivePotential::new(ctx.pot, ctx.model0, model);
    let runs = tsmc_runs(model, twist, &eff, ctx.prompt, k, smc, seed, repeats)?;
    runs.iter()
        .map(|r| {
            let tox = toxicity_analog(ctx.pot, &r.sequences)?;
            let sim = if r.sequences.len() >= 2 {
                Some(pairwise_similarity(&r.sequences, model.vocab().size())?)
            } else {
                None
            };
            Ok((tox, sim, r.log_z))
        })
        .collect()
}

pub fn snapshot(
    ctx: &EvalContext<'_>,
    model: &AutoregressiveModel,
    twist: &dyn Twist,
    generation: u32,
    config: &EvalConfig,
    seed: u64,
) -> Result<MetricsSnapshot> {
    if config.repeats == 0 || config.k_test == 0 {
        return Err(Error::Config("evaluation needs repeats >= 1 and k_test >= 1".into()));
    }
    let stats = run_stats(
        ctx,
        model,
        twist,
        config.k_test,
        config.repeats,
        &config.smc,
        derive_seed(seed, Stream::Eval, u64::from(generation)),
    )?;
    let tox: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let sims: Vec<f64> = stats.iter().filter_map(|s| s.1).collect();
    let lz: Vec<f64> = stats.iter().map(|s| s.2).collect();
    let (mean_toxicity, toxicity_stderr) = mean_stderr(&tox);
    let (log_z_mean, log_z_std) = mean_std(&lz);
    let mean_similarity = if sims.is_empty() { f64::NAN } else { sims.iter().sum::<f64>() / sims.len() as f64 };
    let kl = estimate_kl_target_vs_proposal(
        ctx.model0,
        ctx.pot,
        twist,
        model,
        ctx.prompt,
        config.kl_samples,
        derive_seed(seed, Stream::Eval, 1 << 40 | u64::from(generation)),
    )?;
    let (exact_kl, exact_ctl) = match ctx.exact {
        Some(exact) => {
            let eff = EffectivePotential::new(ctx.pot, ctx.model0, model);
            (
                Some(exact_kl_target_vs_proposal(exact, model, twist, &eff, ctx.prompt)?),
                Some(exact_ctl_loss(exact, model, twist, ctx.prompt)?),
            )
        }
        None => (None, None),
    };
    Ok(MetricsSnapshot {
        generation,
        k_test: config.k_test,
        mean_toxicity,
        toxicity_stderr,
        mean_similarity,
        log_z_mean,
        log_z_std,
        kl_estimate: kl.estimate,
        kl_stderr: kl.std_error,
        exact_kl,
        exact_ctl_loss: exact_ctl,
        target_toxicity: ctx.target_toxicity(),
        acceptance_ratio: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub generation: u32,
    pub k: usize,
    pub mean_toxicity: f64,
    pub std: f64,
    pub std_error: f64,
    pub target_toxicity: Option<f64>,
}

/// Mean toxicity-analog of TSMC outputs for every (generation, K) cell.
pub fn particle_efficiency_curve(
    ctx: &EvalContext<'_>,
    records: &[GenerationRecord],
    ks: &[usize],
    repeats: usize,
    smc: &SmcConfig,
    seed: u64,
) -> Result<Vec<EfficiencyRow>> {
    if repeats == 0 || ks.contains(&0) {
        return Err(Error::Config("particle efficiency needs repeats >= 1 and K >= 1".into()));
    }
    let target = ctx.target_toxicity();
    let mut rows = Vec::new();
    for rec in records {
        for &k in ks {
            let cell_seed = derive_seed(seed, Stream::Eval, u64::from(rec.index) << 32 | k as u64);
            let stats = run_stats(ctx, &rec.model, &rec.twist, k, repeats, smc, cell_seed)?;
            let tox: Vec<f64> = stats.iter().map(|s| s.0).collect();
            let (mean, std) = mean_std(&tox);
            let (_, se) = mean_stderr(&tox);
            rows.push(EfficiencyRow {
                generation: rec.index,
                k,
                mean_toxicity: mean,
                std,
                std_error: se,
                target_toxicity: target,
            });
        }
    }
    Ok(rows)
}

fn opt(x: Option<f64>) -> String {
    x.map(format_sig).unwrap_or_default()
}

pub fn write_particle_efficiency_csv<W: Write>(rows: &[EfficiencyRow], mut w: W) -> Result<()> {
    writeln!(w, "generation,k,mean_toxicity,std,std_error,target_toxicity")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.generation,
            r.k,
            format_sig(r.mean_toxicity),
            format_sig(r.std),
            format_sig(r.std_error),
            opt(r.target_toxicity)
        )?;
    }
    Ok(())
}

pub fn write_kl_per_generation_csv<W: Write>(snaps: &[MetricsSnapshot], mut w: W) -> Result<()> {
    writeln!(w, "generation,exact_kl,estimated_kl,estimated_kl_se,exact_ctl_loss")?;
    for s in snaps {
        writeln!(
            w,
            "{},{},{},{},{}",
            s.generation,
            opt(s.exact_kl),
            format_sig(s.kl_estimate),
            format_sig(s.kl_stderr),
            opt(s.exact_ctl_loss)
        )?;
    }
    Ok(())
}

/// One point of the similarity/toxicity scatter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodPoint {
    pub method: String,
    pub similarity: f64,
    pub toxicity: f64,
    pub toxicity_std: f64,
}

impl MethodPoint {
    pub fn from_samples(method: impl Into<String>, pot: &Potential, seqs: &[Sequence], vocab: usize) -> Result<Self> {
        let tox: Vec<f64> = seqs.iter().map(|s| pot.classifier_prob(&s.0)).collect();
        let (mean, std) = mean_std(&tox);
        Ok(Self {
            method: method.into(),
            similarity: pairwise_similarity(seqs, vocab)?,
            toxicity: mean,
            toxicity_std: std,
        })
    }
}

pub fn write_similarity_toxicity_csv<W: Write>(points: &[MethodPoint], mut w: W) -> Result<()> {
    writeln!(w, "method,similarity,toxicity,toxicity_std")?;
    for p in points {
        writeln!(
            w,
            "{},{},{},{}",
            p.method,
            format_sig(p.similarity),
            format_sig(p.toxicity),
            format_sig(p.toxicity_std)
        )?;
    }
    Ok(())
}

/// Histogram counts of toxicity scores over `bins` equal-width bins on
/// `[0, 1]`, one block of rows per label.
pub fn write_toxicity_hist_csv<W: Write>(groups: &[(String, Vec<f64>)], bins: usize, mut w: W) -> Result<()> {
    if bins == 0 {
        return Err(Error::domain("histogram needs at least one bin"));
    }
    writeln!(w, "label,bin_lo,bin_hi,count")?;
    for (label, xs) in groups {
        let mut counts = vec![0u64; bins];
        for &x in xs {
            let b = ((x * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            let lo = b as f64 / bins as f64;
            let hi = (b + 1) as f64 / bins as f64;
            writeln!(w, "{label},{},{},{c}", format_sig(lo), format_sig(hi))?;
        }
    }
    Ok(())
}
