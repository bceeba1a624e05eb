//! Sequence-level potentials `φ ∈ (0, 1]` and the generation-indexed
//! effective potential used once the base model has been self-distilled.

use crate::error::{Error, Result};
use crate::math::log_sigmoid;
use crate::seqmodel::{AutoregressiveModel, Prompt, TokenId, DEFAULT_LOG_FLOOR};

/// Anything that scores complete continuations in log domain.
pub trait SequencePotential: Sync {
    /// `log φ(s_{1:T})`, always `<= 0` for a [`Potential`].
    fn log_score(&self, prompt: &Prompt, seq: &[TokenId]) -> f64;

    /// `log φ(prefix ⊕ v)` for every token `v`, where `prefix` has `T - 1` tokens.
    fn log_score_extensions(&self, prompt: &Prompt, prefix: &[TokenId], vocab: usize) -> Vec<f64> {
        let mut seq = prefix.to_vec();
        seq.push(0);
        (0..vocab)
            .map(|v| {
                *seq.last_mut().unwrap() = v;
                self.log_score(prompt, &seq)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scorer {
    /// `p(toxic | s) = sigmoid(bias + Σ_t weights[s_t])`.
    Logistic { weights: Vec<f64>, bias: f64 },
    /// Explicit `log p(toxic | s)` for every sequence, indexed by the
    /// sequence read as a base-`vocab` number (first token most significant).
    Table { vocab: usize, horizon: usize, log_probs: Vec<f64> },
}

/// `φ(s) = p(toxic | s)^β`, clamped below at `log_floor`.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    scorer: Scorer,
    beta: f64,
    log_floor: f64,
}

impl Potential {
    pub fn logistic(weights: Vec<f64>, bias: f64, beta: f64) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite()) || !bias.is_finite() {
            return Err(Error::domain("classifier weights and bias must be finite"));
        }
        Self::build(Scorer::Logistic { weights, bias }, beta)
    }

    /// Table potential from raw scores in `(0, 1]`.
    pub fn table(vocab: usize, horizon: usize, scores: &[f64], beta: f64) -> Result<Self> {
        let n = vocab
            .checked_pow(horizon as u32)
            .ok_or_else(|| Error::domain("table potential too large"))?;
        if scores.len() != n {
            return Err(Error::domain(format!("table potential needs {n} scores, got {}", scores.len())));
        }
        if scores.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(Error::domain("table scores must lie in (0, 1]"));
        }
        let log_probs = scores.iter().map(|s| s.ln()).collect();
        Self::build(Scorer::Table { vocab, horizon, log_probs }, beta)
    }

    fn build(scorer: Scorer, beta: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::domain(format!("temperature must be finite and >= 0, got {beta}")));
        }
        Ok(Self {
            scorer,
            beta,
            log_floor: DEFAULT_LOG_FLOOR,
        })
    }

    pub fn with_log_floor(mut self, log_floor: f64) -> Self {
        self.log_floor = log_floor;
        self
    }

    /// Same scorer at a different temperature.
    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        let mut p = Self::build(self.scorer.clone(), beta)?;
        p.log_floor = self.log_floor;
        Ok(p)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn scorer(&self) -> &Scorer {
        &self.scorer
    }

    /// `log p(toxic | s)`, the unclamped classifier log-probability.
    pub fn log_classifier(&self, seq: &[TokenId]) -> f64 {
        match &self.scorer {
            Scorer::Logistic { weights, bias } => log_sigmoid(bias + seq.iter().map(|&t| weights[t]).sum::<f64>()),
            Scorer::Table { vocab, log_probs, .. } => log_probs[seq.iter().fold(0, |acc, &t| acc * vocab + t)],
        }
    }

    /// `p(toxic | s)`, the toxicity analog (temperature 1).
    pub fn classifier_prob(&self, seq: &[TokenId]) -> f64 {
        self.log_classifier(seq).exp()
    }

    pub fn check(&self, vocab: usize, horizon: usize) -> Result<()> {
        match &self.scorer {
            Scorer::Logistic { weights, .. } if weights.len() != vocab => Err(Error::domain(format!(
                "potential has {} token weights, vocabulary has {vocab}",
                weights.len()
            ))),
            Scorer::Table { vocab: v, horizon: h, .. } if *v != vocab || *h != horizon => {
                Err(Error::domain("table potential does not match vocabulary/horizon"))
            }
            _ => Ok(()),
        }
    }
}

impl SequencePotential for Potential {
    fn log_score(&self, _prompt: &Prompt, seq: &[TokenId]) -> f64 {
        if self.beta == 0.0 {
            return 0.0;
        }
        (self.beta * self.log_classifier(seq)).max(self.log_floor)
    }
}

/// `φ^(m)(s) = p^(0)(s) φ(s) / p^(m)(s)`: the potential that keeps the target
/// unchanged when the base model is replaced by a distilled one.
#[derive(Debug, Clone, Copy)]
pub struct EffectivePotential<'a> {
    base: &'a Potential,
    reference: &'a AutoregressiveModel,
    current: &'a AutoregressiveModel,
    identity: bool,
}

impl<'a> EffectivePotential<'a> {
    pub fn new(base: &'a Potential, reference: &'a AutoregressiveModel, current: &'a AutoregressiveModel) -> Self {
        let identity = std::ptr::eq(reference, current) || reference == current;
        Self {
            base,
            reference,
            current,
            identity,
        }
    }

    /// Generation-0 form: the current model is the reference, `φ^(0) = φ`.
    pub fn identity(base: &'a Potential, reference: &'a AutoregressiveModel) -> Self {
        Self::new(base, reference, reference)
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn base(&self) -> &'a Potential {
        self.base
    }
    pub fn reference(&self) -> &'a AutoregressiveModel {
        self.reference
    }
    pub fn current(&self) -> &'a AutoregressiveModel {
        self.current
    }

    pub fn log_effective_score(&self, prompt: &Prompt, seq: &[TokenId]) -> f64 {
        self.log_score(prompt, seq)
    }
}

impl SequencePotential for EffectivePotential<'_> {
    fn log_score(&self, prompt: &Prompt, seq: &[TokenId]) -> f64 {
        let base = self.base.log_score(prompt, seq);
        if self.is_identity() {
            return base;
        }
        let lp0 = self.reference.prefix_logprob_unchecked(&prompt.tokens, seq);
        let lpm = self.current.prefix_logprob_unchecked(&prompt.tokens, seq);
        lp0 + base - lpm
    }

    fn log_score_extensions(&self, prompt: &Prompt, prefix: &[TokenId], vocab: usize) -> Vec<f64> {
        let base = self.base.log_score_extensions(prompt, prefix, vocab);
        if self.is_identity() {
            return base;
        }
        let lp0 = self.reference.prefix_logprob_unchecked(&prompt.tokens, prefix);
        let lpm = self.current.prefix_logprob_unchecked(&prompt.tokens, prefix);
        let c0 = self.reference.next_token_logprobs_unchecked(&prompt.tokens, prefix);
        let cm = self.current.next_token_logprobs_unchecked(&prompt.tokens, prefix);
        (0..vocab).map(|v| (lp0 + c0[v]) + base[v] - (lpm + cm[v])).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::Vocab;
    use proptest::prelude::*;

    fn prompt(h: usize) -> Prompt {
        Prompt::new(vec![], h).unwrap()
    }

    #[test]
    fn logistic_examples() {
        let p = Potential::logistic(vec![-2.0, 2.0], 0.0, 1.0).unwrap();
        assert!((p.log_score(&prompt(2), &[1, 1]) - (-0.018149927917809)).abs() < 1e-12);
        let p10 = p.with_beta(10.0).unwrap();
        assert!((p10.log_score(&prompt(2), &[1, 1]) - (-0.18149927917809)).abs() < 1e-11);
        let p0 = p.with_beta(0.0).unwrap();
        assert_eq!(p0.log_score(&prompt(2), &[0, 0]), 0.0);
    }

    #[test]
    fn rejects_negative_temperature() {
        assert!(Potential::logistic(vec![0.0, 0.0], 0.0, -1.0).is_err());
        assert!(Potential::table(2, 2, &[1.0, 0.0, 0.5, 0.5], 1.0).is_err());
    }

    #[test]
    fn table_potential_indexing() {
        let p = Potential::table(2, 2, &[0.25, 0.25, 0.25, 1.0], 1.0).unwrap();
        assert_eq!(p.log_score(&prompt(2), &[1, 1]), 0.0);
        assert!((p.log_score(&prompt(2), &[1, 0]) - 0.25f64.ln()).abs() < 1e-15);
        let ext = p.log_score_extensions(&prompt(2), &[1], 2);
        assert_eq!(ext, vec![0.25f64.ln(), 0.0]);
    }

    #[test]
    fn effective_score_with_doubled_probability() {
        let vocab = Vocab::new(2).unwrap();
        let p0 = AutoregressiveModel::tabular_from_probs(vocab.clone(), 1, &[vec![0.5, 0.5]], -45.0).unwrap();
        // p1("a") = 2 · p0("a") for T = 1
        let p1 = AutoregressiveModel::tabular_from_probs(vocab, 1, &[vec![1.0, 0.0]], -45.0).unwrap();
        let phi = Potential::logistic(vec![-2.0, 2.0], 0.0, 1.0).unwrap();
        let eff = EffectivePotential::new(&phi, &p0, &p1);
        let pr = prompt(1);
        let want = phi.log_score(&pr, &[0]) - 2f64.ln();
        assert!((eff.log_effective_score(&pr, &[0]) - want).abs() < 1e-12);
        let ext = eff.log_score_extensions(&pr, &[], 2);
        assert!((ext[0] - want).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn score_bounded_and_monotone_in_beta(
            seq in prop::collection::vec(0usize..3, 4),
            w in prop::collection::vec(-3.0f64..3.0, 3),
            b in -4.0f64..4.0,
            beta in 0.0f64..20.0,
            extra in 0.0f64..5.0,
        ) {
            let p = Potential::logistic(w, b, beta).unwrap();
            let q = p.with_beta(beta + extra).unwrap();
            let pr = prompt(4);
            let (a, c) = (p.log_score(&pr, &seq), q.log_score(&pr, &seq));
            prop_assert!(a <= 0.0 && a >= DEFAULT_LOG_FLOOR);
            prop_assert!(c <= a + 1e-15);
        }
    }
}
