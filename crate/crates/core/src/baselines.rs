//! Policy fine-tuning baselines: DPO on reward-sorted pairs and GRPO with
//! group-normalized advantages, both leashed to a frozen reference.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_sigmoid, mean_std, sigmoid};
use crate::mlp::{Optimizer, OptimizerKind};
use crate::potential::{Potential, SequencePotential};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::seqmodel::{AutoregressiveModel, Prompt, Sequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub pos: Sequence,
    pub neg: Sequence,
    pub reward_pos: f64,
    pub reward_neg: f64,
}

/// Sorts by reward (descending, ties by draw order) and pairs rank `i` of
/// the top half with rank `i` of the bottom half; the middle sample of an
/// odd batch is dropped.
pub fn pair_by_reward(samples: Vec<(Sequence, f64)>) -> Vec<PreferencePair> {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.sort_by(|&a, &b| samples[b].1.total_cmp(&samples[a].1).then(a.cmp(&b)));
    let half = samples.len() / 2;
    let n = samples.len();
    (0..half)
        .map(|i| {
            let (p, q) = (&samples[idx[i]], &samples[idx[n - half + i]]);
            PreferencePair {
                pos: p.0.clone(),
                neg: q.0.clone(),
                reward_pos: p.1,
                reward_neg: q.1,
            }
        })
        .collect()
}

/// `n` draws from `model`, each from its own `(seed, index)` stream.
pub fn sample_batch(model: &AutoregressiveModel, prompt: &Prompt, n: usize, seed: u64) -> Vec<Sequence> {
    (0..n)
        .into_par_iter()
        .map(|i| model.sample_sequence(prompt, &mut stream_rng(seed, Stream::Baselines, 0, i as u64)))
        .collect()
}

pub fn build_preference_batch(
    reference: &AutoregressiveModel,
    reward: &dyn SequencePotential,
    prompt: &Prompt,
    n: usize,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    if n < 2 {
        return Err(Error::domain("a preference batch needs at least two samples"));
    }
    let samples = sample_batch(reference, prompt, n, seed)
        .into_iter()
        .map(|s| {
            let r = reward.log_score(prompt, &s.0);
            (s, r)
        })
        .collect();
    Ok(pair_by_reward(samples))
}

fn require_neural(policy: &AutoregressiveModel) -> Result<()> {
    if policy.as_neural().is_none() {
        return Err(Error::domain("baselines train neural policies only"));
    }
    Ok(())
}

/// `−mean log sigmoid(β [(log π(s+) − log π_ref(s+)) − (log π(s−) − log π_ref(s−))])`.
pub fn dpo_loss_and_grad(
    policy: &AutoregressiveModel,
    reference: &AutoregressiveModel,
    beta: f64,
    prompt: &Prompt,
    pairs: &[PreferencePair],
) -> Result<(f64, Vec<f64>)> {
    require_neural(policy)?;
    if pairs.is_empty() {
        return Err(Error::domain("DPO needs at least one pair"));
    }
    let n = pairs.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; policy.param_count()];
    for pair in pairs {
        let lp = policy.sequence_logprob(prompt, &pair.pos.0)? - reference.sequence_logprob(prompt, &pair.pos.0)?;
        let ln = policy.sequence_logprob(prompt, &pair.neg.0)? - reference.sequence_logprob(prompt, &pair.neg.0)?;
        let margin = beta * (lp - ln);
        loss -= log_sigmoid(margin) / n;
        let coef = sigmoid(-margin) * beta / n;
        policy.accumulate_grad_sequence_logprob(&prompt.tokens, &pair.pos.0, coef, &mut grad);
        policy.accumulate_grad_sequence_logprob(&prompt.tokens, &pair.neg.0, -coef, &mut grad);
    }
    // accumulated the gradient of −loss
    grad.iter_mut().for_each(|g| *g = -*g);
    Ok((loss, grad))
}

/// `(r − mean r) / std r` with the population standard deviation.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::domain("GRPO needs at least two samples"));
    }
    let (mean, std) = mean_std(rewards);
    if !(std > 0.0) {
        return Err(Error::DegenerateBatch);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Per-token log-probabilities `log π(s_t | s_{<t})` of every sequence.
pub fn token_logprobs(model: &AutoregressiveModel, prompt: &Prompt, seqs: &[Sequence]) -> Vec<Vec<f64>> {
    seqs.par_iter()
        .map(|s| {
            (0..s.len())
                .map(|t| model.next_token_logprobs_unchecked(&prompt.tokens, &s.0[..t])[s.0[t]])
                .collect()
        })
        .collect()
}

/// GRPO loss with the ratio taken against `old` token log-probabilities:
///
/// `(1/NT) Σ_n Σ_t [ −exp(log π − old) Â_n + β (ρ − log ρ − 1) ]`, `ρ = π_ref / π`.
///
/// With `old` equal to the current policy's values this is the stop-gradient
/// objective, whose gradient [`grpo_loss_and_grad`] returns.
pub fn grpo_surrogate_loss(
    policy: &AutoregressiveModel,
    reference: &AutoregressiveModel,
    beta: f64,
    prompt: &Prompt,
    seqs: &[Sequence],
    advantages: &[f64],
    old: &[Vec<f64>],
) -> f64 {
    let cur = token_logprobs(policy, prompt, seqs);
    let refs = token_logprobs(reference, prompt, seqs);
    let nt = (seqs.len() * prompt.horizon) as f64;
    let mut loss = 0.0;
    for n in 0..seqs.len() {
        for t in 0..cur[n].len() {
            let ratio = (cur[n][t] - old[n][t]).exp();
            let log_rho = refs[n][t] - cur[n][t];
            loss += -ratio * advantages[n] + beta * (log_rho.exp() - log_rho - 1.0);
        }
    }
    loss / nt
}

/// Loss value and gradient at the current policy; the ratio term contributes
/// `−Â ∇log π` and the regularizer `β (1 − ρ) ∇log π` per token.
pub fn grpo_loss_and_grad(
    policy: &AutoregressiveModel,
    reference: &AutoregressiveModel,
    beta: f64,
    prompt: &Prompt,
    seqs: &[Sequence],
    rewards: &[f64],
) -> Result<(f64, Vec<f64>)> {
    require_neural(policy)?;
    if seqs.len() != rewards.len() {
        return Err(Error::domain("one reward per sequence"));
    }
    let adv = group_advantages(rewards)?;
    let cur = token_logprobs(policy, prompt, seqs);
    let refs = token_logprobs(reference, prompt, seqs);
    let nt = (seqs.len() * prompt.horizon) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; policy.param_count()];
    for (n, s) in seqs.iter().enumerate() {
        for t in 0..s.len() {
            let log_rho = refs[n][t] - cur[n][t];
            let rho = log_rho.exp();
            loss += -adv[n] + beta * (rho - log_rho - 1.0);
            let coef = (-adv[n] + beta * (1.0 - rho)) / nt;
            policy.accumulate_grad_token_logprob(&prompt.tokens, &s.0[..t], s.0[t], coef, &mut grad);
        }
    }
    Ok((loss / nt, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Dpo,
    Grpo,
}

impl BaselineKind {
    pub fn tag(self) -> &'static str {
        match self {
            BaselineKind::Dpo => "baseline_dpo",
            BaselineKind::Grpo => "baseline_grpo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// `β_DPO` or `β_GRPO`.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub weight_decay: f64,
    /// Policy samples for the trace are drawn every this many steps.
    #[serde(default = "default_trace_every")]
    pub trace_every: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch() -> usize {
    256
}
fn default_steps() -> usize {
    1000
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta() -> f64 {
    0.1
}
fn default_trace_every() -> usize {
    10
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch(),
            steps: default_steps(),
            learning_rate: default_lr(),
            beta: default_beta(),
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            trace_every: default_trace_every(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineTraceRow {
    pub step: usize,
    pub loss: f64,
    pub mean_reward: f64,
    pub kl_to_reference: f64,
    pub skipped: bool,
}

/// Trainable policy plus its frozen reference.
pub struct PolicyTrainState {
    pub policy: AutoregressiveModel,
    reference: AutoregressiveModel,
    pub beta: f64,
    optimizer: Optimizer,
}

impl PolicyTrainState {
    pub fn new(policy: AutoregressiveModel, config: &BaselineConfig) -> Result<Self> {
        require_neural(&policy)?;
        let n = policy.param_count();
        let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, n);
        if config.weight_decay > 0.0 {
            let mask = policy.as_neural().unwrap().mlp().weight_mask();
            optimizer = optimizer.with_weight_decay(config.weight_decay, mask);
        }
        Ok(Self {
            reference: policy.clone(),
            policy,
            beta: config.beta,
            optimizer,
        })
    }

    pub fn reference(&self) -> &AutoregressiveModel {
        &self.reference
    }

    fn apply(&mut self, grad: &[f64]) {
        let params = self.policy.as_neural_mut().unwrap().params_mut();
        self.optimizer.step(params, grad);
    }
}

/// Monte Carlo `KL(π ‖ π_ref)` and mean reward over policy samples.
fn policy_stats(state: &PolicyTrainState, reward: &Potential, prompt: &Prompt, seqs: &[Sequence]) -> (f64, f64) {
    let n = seqs.len() as f64;
    let vals: Vec<(f64, f64)> = seqs
        .par_iter()
        .map(|s| {
            let lp = state.policy.prefix_logprob_unchecked(&prompt.tokens, &s.0);
            let lr = state.reference.prefix_logprob_unchecked(&prompt.tokens, &s.0);
            (reward.log_score(prompt, &s.0), lp - lr)
        })
        .collect();
    (vals.iter().map(|v| v.0).sum::<f64>() / n, vals.iter().map(|v| v.1).sum::<f64>() / n)
}

/// Fine-tunes `policy` (which also becomes the frozen reference) with reward
/// `log φ`.
pub fn train_baseline(
    kind: BaselineKind,
    policy: AutoregressiveModel,
    reward: &Potential,
    prompt: &Prompt,
    config: &BaselineConfig,
) -> Result<(AutoregressiveModel, Vec<BaselineTraceRow>)> {
    if config.steps == 0 || config.batch_size < 2 || !(config.learning_rate > 0.0) || !(config.beta >= 0.0) {
        return Err(Error::Config(
            "baselines need steps >= 1, batch_size >= 2, learning_rate > 0, beta >= 0".into(),
        ));
    }
    let mut state = PolicyTrainState::new(policy, config)?;
    let mut trace = Vec::new();
    let every = config.trace_every.max(1);
    for step in 0..config.steps {
        let seed = derive_seed(config.seed, Stream::Baselines, step as u64);
        let (loss, grad, batch) = match kind {
            BaselineKind::Dpo => {
                let pairs = build_preference_batch(&state.reference, reward, prompt, config.batch_size, seed)?;
                let (l, g) = dpo_loss_and_grad(&state.policy, &state.reference, state.beta, prompt, &pairs)?;
                (l, Some(g), None)
            }
            BaselineKind::Grpo => {
                let seqs = sample_batch(&state.policy, prompt, config.batch_size, seed);
                let rewards: Vec<f64> = seqs.iter().map(|s| reward.log_score(prompt, &s.0)).collect();
                match grpo_loss_and_grad(&state.policy, &state.reference, state.beta, prompt, &seqs, &rewards) {
                    Ok((l, g)) => (l, Some(g), Some(seqs)),
                    Err(Error::DegenerateBatch) => (f64::NAN, None, Some(seqs)),
                    Err(e) => return Err(e),
                }
            }
        };
        let skipped = grad.is_none();
        if step % every == 0 || step + 1 == config.steps {
            let seqs = match batch {
                Some(b) => b,
                None => sample_batch(&state.policy, prompt, config.batch_size, derive_seed(seed, Stream::Eval, 0)),
            };
            let (mean_reward, kl) = policy_stats(&state, reward, prompt, &seqs);
            trace.push(BaselineTraceRow {
                step,
                loss,
                mean_reward,
                kl_to_reference: kl,
                skipped,
            });
        }
        if let Some(g) = grad {
            state.apply(&g);
        }
    }
    Ok((state.policy, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::Vocab;

    fn seq(v: &[usize]) -> Sequence {
        Sequence(v.to_vec())
    }

    fn setup() -> (AutoregressiveModel, Prompt) {
        let tab = AutoregressiveModel::tabular_random(Vocab::new(3).unwrap(), 2, 1.0, &[0.0; 3], 4).unwrap();
        let p = Prompt::new(vec![], 3).unwrap();
        (AutoregressiveModel::neural_from_tabular(&tab, 3, 4, 1).unwrap(), p)
    }

    #[test]
    fn pairing_examples() {
        let pairs = pair_by_reward(vec![(seq(&[0]), 0.1), (seq(&[1]), 0.9)]);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].pos, seq(&[1]));
        let five: Vec<_> = (0..5).map(|i| (seq(&[i]), i as f64)).collect();
        let pairs = pair_by_reward(five);
        assert_eq!(pairs.len(), 2);
        assert_eq!((pairs[0].reward_pos, pairs[0].reward_neg), (4.0, 1.0));
        assert_eq!((pairs[1].reward_pos, pairs[1].reward_neg), (3.0, 0.0));
        assert!(pairs.iter().all(|p| p.reward_pos >= p.reward_neg));
    }

    #[test]
    fn dpo_at_reference_is_log_two() {
        let (m, p) = setup();
        let pairs = pair_by_reward(vec![(seq(&[0, 1, 2]), 1.0), (seq(&[2, 2, 2]), 0.0), (seq(&[1, 0, 0]), 0.5), (seq(&[0, 0, 0]), 0.2)]);
        let (loss, _) = dpo_loss_and_grad(&m, &m, 0.5, &p, &pairs).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        let tie = pair_by_reward(vec![(seq(&[0, 1, 2]), 1.0), (seq(&[0, 1, 2]), 1.0)]);
        let (_, g) = dpo_loss_and_grad(&m, &m, 0.5, &p, &tie).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn advantages_are_standardized() {
        let a = group_advantages(&[1.0, 2.0, 4.0, -3.0]).unwrap();
        let (m, s) = mean_std(&a);
        assert!(m.abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
        assert!(matches!(group_advantages(&[1.0, 1.0]), Err(Error::DegenerateBatch)));
    }

    #[test]
    fn grpo_zero_at_reference_with_zero_advantages() {
        let (m, p) = setup();
        let seqs = vec![seq(&[0, 1, 2]), seq(&[2, 1, 0])];
        let old = token_logprobs(&m, &p, &seqs);
        let l = grpo_surrogate_loss(&m, &m, 0.1, &p, &seqs, &[0.0, 0.0], &old);
        assert!(l.abs() < 1e-15);
    }

    #[test]
    fn dpo_training_is_deterministic() {
        let (m, p) = setup();
        let phi = Potential::logistic(vec![-1.0, 0.0, 1.0], 0.0, 1.0).unwrap();
        let cfg = BaselineConfig {
            batch_size: 16,
            steps: 5,
            trace_every: 1,
            learning_rate: 0.01,
            ..BaselineConfig::default()
        };
        let a = train_baseline(BaselineKind::Dpo, m.clone(), &phi, &p, &cfg).unwrap();
        let b = train_baseline(BaselineKind::Dpo, m, &phi, &p, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
