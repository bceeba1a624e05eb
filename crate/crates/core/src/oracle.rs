//! Exact inference by enumerating every continuation, and rejection sampling.
//!
//! Sequences and prefixes are indexed by reading their tokens as a base-`V`
//! number with the first token most significant, so the children of prefix
//! code `c` are `c·V + v`. All quantities are kept in log domain.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{format_sig, log_sum_exp};
use crate::potential::SequencePotential;
use crate::rng::{stream_rng, Stream};
use crate::seqmodel::{AutoregressiveModel, Prompt, Sequence, TokenId, Vocab};
use crate::twist::Twist;

/// Largest number of complete sequences an oracle will enumerate.
pub const ENUMERATION_LIMIT: u64 = 1 << 22;

/// Default cap on rejection-sampling attempts.
pub const DEFAULT_ATTEMPT_CAP: u64 = 100_000_000;

pub fn check_capacity(vocab: usize, horizon: usize) -> Result<usize> {
    let n = (vocab as u128).checked_pow(horizon as u32).unwrap_or(u128::MAX);
    if n > ENUMERATION_LIMIT as u128 {
        return Err(Error::Capacity {
            sequences: n,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(n as usize)
}

pub fn decode_prefix(code: usize, len: usize, vocab: usize) -> Vec<TokenId> {
    let mut out = vec![0; len];
    let mut c = code;
    for slot in out.iter_mut().rev() {
        *slot = c % vocab;
        c /= vocab;
    }
    out
}

pub fn encode_prefix(prefix: &[TokenId], vocab: usize) -> usize {
    prefix.iter().fold(0, |acc, &t| acc * vocab + t)
}

/// Per-level values `f(prefix)[v]` for every prefix of length `t < T`,
/// flattened as `level[t][code·V + v]`.
fn per_prefix_levels<F>(vocab: usize, horizon: usize, f: F) -> Vec<Vec<f64>>
where
    F: Fn(&[TokenId]) -> Vec<f64> + Sync,
{
    (0..horizon)
        .map(|t| {
            let rows: Vec<Vec<f64>> = (0..vocab.pow(t as u32))
                .into_par_iter()
                .map(|c| f(&decode_prefix(c, t, vocab)))
                .collect();
            rows.concat()
        })
        .collect()
}

/// Next-token log-probabilities of one model at every prefix.
#[derive(Debug, Clone)]
pub struct PrefixTables {
    pub vocab: usize,
    pub horizon: usize,
    /// `cond[t][c·V + v] = log p(v | prefix c)` for prefixes of length `t`.
    pub cond: Vec<Vec<f64>>,
}

impl PrefixTables {
    pub fn build(model: &AutoregressiveModel, prompt: &Prompt) -> Result<Self> {
        let vocab = model.vocab().size();
        check_capacity(vocab, prompt.horizon)?;
        model.vocab().check(&prompt.tokens)?;
        let cond = per_prefix_levels(vocab, prompt.horizon, |prefix| {
            model.next_token_logprobs_unchecked(&prompt.tokens, prefix)
        });
        Ok(Self {
            vocab,
            horizon: prompt.horizon,
            cond,
        })
    }

    /// `log p(s_{1:t})` for every prefix, `t = 0..=T`.
    pub fn log_prefix_probs(&self) -> Vec<Vec<f64>> {
        let v = self.vocab;
        let mut out = vec![vec![0.0]];
        for t in 0..self.horizon {
            let prev = &out[t];
            let next: Vec<f64> = (0..prev.len() * v).map(|i| prev[i / v] + self.cond[t][i]).collect();
            out.push(next);
        }
        out
    }

    /// `log φ(s)` for every complete sequence.
    pub fn leaf_log_potentials(&self, pot: &dyn SequencePotential, prompt: &Prompt) -> Vec<f64> {
        let v = self.vocab;
        let t = self.horizon - 1;
        let rows: Vec<Vec<f64>> = (0..v.pow(t as u32))
            .into_par_iter()
            .map(|c| pot.log_score_extensions(prompt, &decode_prefix(c, t, v), v))
            .collect();
        rows.concat()
    }
}

/// The full target `σ(s_{1:T} | s_0) ∝ p(s) φ(s)` and its prefix marginals.
#[derive(Debug, Clone)]
pub struct ExactDistribution {
    pub vocab: usize,
    pub horizon: usize,
    pub log_z: f64,
    /// `log σ(s)` for every complete sequence.
    pub log_sigma: Vec<f64>,
    /// `marginals[t][c] = log σ(s_{1:t})`, `t = 0..=T`.
    pub marginals: Vec<Vec<f64>>,
}

/// Exact target by enumeration: `σ̃(s) = p(s) φ(s)`, `Z = Σ σ̃`.
pub fn enumerate_target(model: &AutoregressiveModel, pot: &dyn SequencePotential, prompt: &Prompt) -> Result<ExactDistribution> {
    let tables = PrefixTables::build(model, prompt)?;
    let lp = tables.log_prefix_probs();
    let leaves = tables.leaf_log_potentials(pot, prompt);
    let log_tilde: Vec<f64> = lp[prompt.horizon].iter().zip(&leaves).map(|(a, b)| a + b).collect();
    Ok(ExactDistribution::from_log_unnormalized(tables.vocab, prompt.horizon, &log_tilde))
}

impl ExactDistribution {
    pub fn from_log_unnormalized(vocab: usize, horizon: usize, log_tilde: &[f64]) -> Self {
        let log_z = log_sum_exp(log_tilde);
        let log_sigma: Vec<f64> = log_tilde.iter().map(|x| x - log_z).collect();
        let mut marginals = vec![Vec::new(); horizon + 1];
        marginals[horizon] = log_sigma.clone();
        for t in (0..horizon).rev() {
            marginals[t] = marginals[t + 1].chunks(vocab).map(log_sum_exp).collect();
        }
        Self {
            vocab,
            horizon,
            log_z,
            log_sigma,
            marginals,
        }
    }

    pub fn z(&self) -> f64 {
        self.log_z.exp()
    }

    pub fn prob(&self, seq: &[TokenId]) -> f64 {
        self.log_sigma[encode_prefix(seq, self.vocab)].exp()
    }

    pub fn marginal(&self, prefix: &[TokenId]) -> f64 {
        self.marginals[prefix.len()][encode_prefix(prefix, self.vocab)].exp()
    }

    /// `E_σ[f(s)]`.
    pub fn expectation<F: Fn(&[TokenId]) -> f64>(&self, f: F) -> f64 {
        self.log_sigma
            .iter()
            .enumerate()
            .map(|(c, l)| l.exp() * f(&decode_prefix(c, self.horizon, self.vocab)))
            .sum()
    }

    /// Exact i.i.d. draws from the table.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Sequence> {
        let mut cdf = Vec::with_capacity(self.log_sigma.len());
        let mut acc = 0.0;
        for l in &self.log_sigma {
            acc += l.exp();
            cdf.push(acc);
        }
        (0..n)
            .map(|_| {
                let u = rng.random::<f64>() * acc;
                let idx = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                Sequence(decode_prefix(idx, self.horizon, self.vocab))
            })
            .collect()
    }

    /// Sorted CSV dump: the normalizer, every sequence, then every
    /// intermediate marginal.
    pub fn write_csv<W: Write>(&self, vocab: &Vocab, mut w: W) -> Result<()> {
        writeln!(w, "table,prefix,probability,log_probability")?;
        writeln!(w, "Z,,{},{}", format_sig(self.z()), format_sig(self.log_z))?;
        for (c, l) in self.log_sigma.iter().enumerate() {
            let s = vocab.render(&decode_prefix(c, self.horizon, self.vocab));
            writeln!(w, "sigma,{s},{},{}", format_sig(l.exp()), format_sig(*l))?;
        }
        for t in 1..self.horizon {
            for (c, l) in self.marginals[t].iter().enumerate() {
                let s = vocab.render(&decode_prefix(c, t, self.vocab));
                writeln!(w, "marginal_{t},{s},{},{}", format_sig(l.exp()), format_sig(*l))?;
            }
        }
        Ok(())
    }
}

/// `log ψ(prefix ⊕ v)` tables for a twist, same layout as [`PrefixTables::cond`].
fn twist_levels(twist: &dyn Twist, vocab: usize, prompt: &Prompt) -> Vec<Vec<f64>> {
    per_prefix_levels(vocab, prompt.horizon, |prefix| twist.log_twist_all(prompt, prefix))
}

/// Full-sequence log-probabilities of the twist-induced proposal
/// `q(s) = Π_t q_t(s_t | s_{0:t-1})`, where the last step uses `terminal`.
pub fn proposal_log_probs(
    model: &AutoregressiveModel,
    twist: &dyn Twist,
    terminal: &dyn SequencePotential,
    prompt: &Prompt,
) -> Result<Vec<f64>> {
    let tables = PrefixTables::build(model, prompt)?;
    let v = tables.vocab;
    let horizon = prompt.horizon;
    let mut guide = per_prefix_levels(v, horizon - 1, |prefix| twist.log_twist_all(prompt, prefix));
    guide.push(tables.leaf_log_potentials(terminal, prompt));
    let mut log_q = vec![0.0];
    for t in 0..horizon {
        let cond = &tables.cond[t];
        let g = &guide[t];
        let mut next = vec![0.0; log_q.len() * v];
        for (c, &prev) in log_q.iter().enumerate() {
            let row: Vec<f64> = (0..v).map(|u| cond[c * v + u] + g[c * v + u]).collect();
            let lse = log_sum_exp(&row);
            for u in 0..v {
                next[c * v + u] = prev + row[u] - lse;
            }
        }
        log_q = next;
    }
    Ok(log_q)
}

/// `D_KL(σ ‖ q)` over complete sequences.
pub fn exact_kl_target_vs_proposal(
    exact: &ExactDistribution,
    model: &AutoregressiveModel,
    twist: &dyn Twist,
    terminal: &dyn SequencePotential,
    prompt: &Prompt,
) -> Result<f64> {
    let log_q = proposal_log_probs(model, twist, terminal, prompt)?;
    Ok(kl_from_logs(&exact.log_sigma, &log_q))
}

fn kl_from_logs(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .filter(|(lp, _)| lp.is_finite())
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum::<f64>()
        .max(0.0)
}

/// Twisted intermediate targets `π_t(s_{1:t}) ∝ p(s_{1:t}) ψ(s_{1:t})`.
#[derive(Debug, Clone)]
pub struct TwistedTargets {
    /// `log_pi[t][c]` for `t = 1..=T` (index 0 unused).
    pub log_pi: Vec<Vec<f64>>,
    pub log_z_pi: Vec<f64>,
}

pub fn twisted_targets(model: &AutoregressiveModel, twist: &dyn Twist, prompt: &Prompt) -> Result<TwistedTargets> {
    let tables = PrefixTables::build(model, prompt)?;
    let lp = tables.log_prefix_probs();
    let tw = twist_levels(twist, tables.vocab, prompt);
    let mut log_pi = vec![Vec::new()];
    let mut log_z_pi = vec![0.0];
    for t in 1..=prompt.horizon {
        let tilde: Vec<f64> = lp[t].iter().zip(&tw[t - 1]).map(|(a, b)| a + b).collect();
        let z = log_sum_exp(&tilde);
        log_pi.push(tilde.iter().map(|x| x - z).collect());
        log_z_pi.push(z);
    }
    Ok(TwistedTargets { log_pi, log_z_pi })
}

/// Exact contrastive-twist loss `Σ_t D_KL(σ(s_{1:t}) ‖ π_t(s_{1:t}))`.
pub fn exact_ctl_loss(exact: &ExactDistribution, model: &AutoregressiveModel, twist: &dyn Twist, prompt: &Prompt) -> Result<f64> {
    let targets = twisted_targets(model, twist, prompt)?;
    Ok((1..=prompt.horizon)
        .map(|t| kl_from_logs(&exact.marginals[t], &targets.log_pi[t]))
        .sum())
}

/// `D_KL(a ‖ b)` between two models' sequence distributions.
pub fn exact_sequence_kl(a: &AutoregressiveModel, b: &AutoregressiveModel, prompt: &Prompt) -> Result<f64> {
    let la = PrefixTables::build(a, prompt)?.log_prefix_probs().pop().unwrap();
    let lb = PrefixTables::build(b, prompt)?.log_prefix_probs().pop().unwrap();
    Ok(kl_from_logs(&la, &lb))
}

#[derive(Debug, Clone)]
pub struct RejectionResult {
    pub samples: Vec<Sequence>,
    pub attempts: u64,
}

impl RejectionResult {
    pub fn acceptance_ratio(&self) -> f64 {
        self.samples.len() as f64 / self.attempts as f64
    }
}

/// Draws from the base model and accepts each candidate with probability
/// `φ(candidate)`; accepted samples are exact draws from the target.
pub fn rejection_sample(
    model: &AutoregressiveModel,
    pot: &dyn SequencePotential,
    prompt: &Prompt,
    n_accepts: usize,
    seed: u64,
    attempt_cap: u64,
) -> Result<RejectionResult> {
    let mut rng = stream_rng(seed, Stream::Rejection, 0, 0);
    let mut samples = Vec::with_capacity(n_accepts);
    let mut attempts = 0u64;
    while samples.len() < n_accepts {
        if attempts >= attempt_cap {
            return Err(Error::Starvation {
                accepted: samples.len(),
                attempts,
                cap: attempt_cap,
            });
        }
        attempts += 1;
        let cand = model.sample_sequence(prompt, &mut rng);
        let log_accept = pot.log_score(prompt, &cand.0);
        if rng.random::<f64>() < log_accept.exp() {
            samples.push(cand);
        }
    }
    Ok(RejectionResult { samples, attempts })
}

/// Total-variation distance between an empirical sample and an exact table.
pub fn tv_to_exact(samples: &[Sequence], exact: &ExactDistribution) -> f64 {
    let mut counts = vec![0.0; exact.log_sigma.len()];
    for s in samples {
        counts[encode_prefix(&s.0, exact.vocab)] += 1.0;
    }
    let n = samples.len() as f64;
    0.5 * counts
        .iter()
        .zip(&exact.log_sigma)
        .map(|(c, l)| (c / n - l.exp()).abs())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::Potential;
    use crate::twist::{optimal_twist_table, UnitTwist};

    fn toy() -> (AutoregressiveModel, Potential, Prompt) {
        let m = AutoregressiveModel::uniform(Vocab::new(2).unwrap(), 2).unwrap();
        let phi = Potential::table(2, 2, &[0.25, 0.25, 0.25, 1.0], 1.0).unwrap();
        (m, phi, Prompt::new(vec![], 2).unwrap())
    }

    #[test]
    fn toy_target_by_hand() {
        let (m, phi, p) = toy();
        let ex = enumerate_target(&m, &phi, &p).unwrap();
        assert!((ex.z() - 0.4375).abs() < 1e-12);
        assert!((ex.prob(&[1, 1]) - 4.0 / 7.0).abs() < 1e-12);
        assert!((ex.marginal(&[1]) - 5.0 / 7.0).abs() < 1e-12);
        let total: f64 = ex.log_sigma.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unit_potential_recovers_model() {
        let vocab = Vocab::new(3).unwrap();
        let m = AutoregressiveModel::tabular_random(vocab, 2, 1.0, &[0.0; 3], 3).unwrap();
        let p = Prompt::new(vec![1], 3).unwrap();
        let phi = Potential::logistic(vec![1.0, 2.0, 3.0], 0.0, 0.0).unwrap();
        let ex = enumerate_target(&m, &phi, &p).unwrap();
        assert!(ex.log_z.abs() < 1e-12);
        for c in 0..27 {
            let s = decode_prefix(c, 3, 3);
            let want = m.sequence_logprob(&p, &s).unwrap().exp();
            assert!((ex.prob(&s) - want).abs() < 1e-12);
        }
        let kl = exact_kl_target_vs_proposal(&ex, &m, &UnitTwist { vocab: 3 }, &phi, &p).unwrap();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn tower_property_of_optimal_twist() {
        let vocab = Vocab::new(3).unwrap();
        let m = AutoregressiveModel::tabular_random(vocab, 2, 1.0, &[0.0; 3], 8).unwrap();
        let p = Prompt::new(vec![], 4).unwrap();
        let phi = Potential::logistic(vec![-1.0, 0.5, 2.0], -1.0, 3.0).unwrap();
        let tab = optimal_twist_table(&m, &phi, &p).unwrap();
        // direct enumeration of each prefix's expected future potential
        for t in 0..4 {
            for c in 0..3usize.pow(t as u32) {
                let prefix = decode_prefix(c, t, 3);
                let mut direct = 0.0;
                for f in 0..3usize.pow((4 - t) as u32) {
                    let mut s = prefix.clone();
                    s.extend(decode_prefix(f, 4 - t, 3));
                    let lp_future = m.sequence_logprob(&p, &s).unwrap() - m.prefix_logprob_unchecked(&[], &prefix);
                    direct += (lp_future + phi.log_score(&p, &s)).exp();
                }
                assert!((tab.log_value(&prefix).exp() - direct).abs() < 1e-12);
                if t < 4 {
                    let cond = m.next_token_logprobs(&p, &prefix).unwrap();
                    let rec: f64 = (0..3)
                        .map(|v| {
                            let mut ch = prefix.clone();
                            ch.push(v);
                            cond[v].exp() * tab.log_value(&ch).exp()
                        })
                        .sum();
                    assert!((rec - tab.log_value(&prefix).exp()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn oracle_twist_has_zero_kl_and_ctl_loss() {
        let vocab = Vocab::new(3).unwrap();
        let m = AutoregressiveModel::tabular_random(vocab, 2, 1.0, &[0.0; 3], 2).unwrap();
        let p = Prompt::new(vec![0], 4).unwrap();
        let phi = Potential::logistic(vec![-1.0, 0.0, 2.0], -2.0, 5.0).unwrap();
        let ex = enumerate_target(&m, &phi, &p).unwrap();
        let tab = optimal_twist_table(&m, &phi, &p).unwrap();
        assert!(exact_kl_target_vs_proposal(&ex, &m, &tab, &phi, &p).unwrap() < 1e-10);
        assert!(exact_ctl_loss(&ex, &m, &tab, &p).unwrap() < 1e-10);
        let unit = UnitTwist { vocab: 3 };
        assert!(exact_ctl_loss(&ex, &m, &unit, &p).unwrap() > 1e-3);
    }

    #[test]
    fn untwisted_kl_matches_closed_form() {
        let (m, phi, p) = toy();
        let ex = enumerate_target(&m, &phi, &p).unwrap();
        let kl = exact_kl_target_vs_proposal(&ex, &m, &UnitTwist { vocab: 2 }, &phi, &p).unwrap();
        // last step is exact, so only the first-token marginal differs from p
        let s1 = 5.0f64 / 7.0;
        let want = s1 * (s1 / 0.5).ln() + (1.0 - s1) * ((1.0 - s1) / 0.5).ln();
        assert!((kl - want).abs() < 1e-12);
    }

    #[test]
    fn capacity_guard() {
        let m = AutoregressiveModel::uniform(Vocab::new(2).unwrap(), 2).unwrap();
        let p = Prompt::new(vec![], 23).unwrap();
        let phi = Potential::logistic(vec![0.0, 0.0], 0.0, 1.0).unwrap();
        assert!(matches!(enumerate_target(&m, &phi, &p), Err(Error::Capacity { .. })));
    }

    #[test]
    fn rejection_accepts_everything_at_zero_temperature() {
        let (m, phi, p) = toy();
        let r = rejection_sample(&m, &phi.with_beta(0.0).unwrap(), &p, 1000, 1, DEFAULT_ATTEMPT_CAP).unwrap();
        assert_eq!(r.acceptance_ratio(), 1.0);
        let starved = rejection_sample(&m, &phi, &p, 1000, 1, 10);
        assert!(matches!(starved, Err(Error::Starvation { .. })));
    }

    #[test]
    fn csv_dump_is_sorted_and_complete() {
        let (m, phi, p) = toy();
        let ex = enumerate_target(&m, &phi, &p).unwrap();
        let vocab = Vocab::with_names(vec!["a".into(), "b".into()]).unwrap();
        let mut buf = Vec::new();
        ex.write_csv(&vocab, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 1 + 4 + 2);
        assert!(lines[5].starts_with("sigma,bb,5.71428571429e-1"));
    }
}
