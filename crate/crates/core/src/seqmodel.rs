//! Tokens, prompts, fixed-horizon sequences and autoregressive models.
//!
//! Two model kinds share one interface: a smoothed n-gram table and a small
//! MLP over a window of previous tokens plus the position. Either can be
//! refit by maximum likelihood, which is what self-distillation does between
//! generations.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{categorical_from_uniform, log_softmax_in_place};
use crate::mlp::{Mlp, Optimizer, OptimizerKind, WindowFeatures};
use crate::persist::{FlatFile, Header};
use crate::rng::{stream_rng, Stream};

pub type TokenId = usize;

pub const DEFAULT_LOG_FLOOR: f64 = -45.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    size: usize,
    names: Option<Vec<String>>,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::domain(format!("vocabulary size must be at least 2, got {size}")));
        }
        Ok(Self { size, names: None })
    }

    pub fn with_names(names: Vec<String>) -> Result<Self> {
        let mut v = Self::new(names.len())?;
        let mut seen = std::collections::BTreeSet::new();
        for n in &names {
            if n.is_empty() || n.contains(',') || n.chars().any(char::is_whitespace) {
                return Err(Error::domain(format!("token name {n:?} must be non-empty without commas or whitespace")));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::domain(format!("duplicate token name {n:?}")));
            }
        }
        v.names = Some(names);
        Ok(v)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    pub fn name(&self, id: TokenId) -> String {
        match &self.names {
            Some(n) => n[id].clone(),
            None => id.to_string(),
        }
    }

    pub fn id_of(&self, name: &str) -> Option<TokenId> {
        match &self.names {
            Some(n) => n.iter().position(|x| x == name),
            None => name.parse().ok().filter(|&i: &usize| i < self.size),
        }
    }

    /// Renders tokens compactly: concatenated when every name is one
    /// character, space-separated otherwise.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        let compact = self.names.as_ref().is_some_and(|n| n.iter().all(|s| s.chars().count() == 1));
        let parts: Vec<String> = tokens.iter().map(|&t| self.name(t)).collect();
        if compact {
            parts.concat()
        } else {
            parts.join(" ")
        }
    }

    pub fn check(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.size) {
            Some(t) => Err(Error::domain(format!("token id {t} out of range for vocabulary of size {}", self.size))),
            None => Ok(()),
        }
    }
}

/// Conditioning tokens plus the fixed generation length.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Prompt {
    pub tokens: Vec<TokenId>,
    pub horizon: usize,
}

impl Prompt {
    pub fn new(tokens: Vec<TokenId>, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::domain("horizon must be at least 1"));
        }
        Ok(Self { tokens, horizon })
    }
}

/// The generated continuation `s_{1:T}`; the prompt is carried separately.
/// A prefix `s_{1:t}` is a plain `&[TokenId]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sequence(pub Vec<TokenId>);

impl Sequence {
    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<TokenId>> for Sequence {
    fn from(v: Vec<TokenId>) -> Self {
        Sequence(v)
    }
}

/// Smoothed n-gram table. Contexts are the previous `order - 1` tokens of
/// `prompt ⊕ prefix`, padded with a start symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularModel {
    vocab: usize,
    order: usize,
    log_probs: Vec<f64>,
}

impl TabularModel {
    fn context_count(vocab: usize, order: usize) -> usize {
        (vocab + 1).pow((order - 1) as u32)
    }

    fn context_index(&self, prompt: &[TokenId], prefix: &[TokenId]) -> usize {
        let stride = self.vocab + 1;
        let total = prompt.len() + prefix.len();
        let mut idx = 0;
        let mut place = 1;
        for j in 0..self.order - 1 {
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
            idx += tok * place;
            place *= stride;
        }
        idx
    }

    fn row(&self, ctx: usize) -> &[f64] {
        &self.log_probs[ctx * self.vocab..(ctx + 1) * self.vocab]
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Conditional log-probabilities, one row of `vocab` entries per context.
    pub fn table(&self) -> &[f64] {
        &self.log_probs
    }
}

/// MLP over [`WindowFeatures`] with a softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralModel {
    features: WindowFeatures,
    mlp: Mlp,
}

impl NeuralModel {
    pub fn features(&self) -> WindowFeatures {
        self.features
    }
    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }
    pub fn params(&self) -> &[f64] {
        self.mlp.params()
    }
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.mlp.params_mut()
    }

    fn log_probs(&self, prompt: &[TokenId], prefix: &[TokenId]) -> (Vec<usize>, crate::mlp::Activation, Vec<f64>) {
        let active = self.features.active(prompt, prefix);
        let act = self.mlp.forward(&active);
        let mut lp = act.output.clone();
        log_softmax_in_place(&mut lp);
        (active, act, lp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Tabular(TabularModel),
    Neural(NeuralModel),
}

/// A next-token model tagged with its self-distillation generation `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoregressiveModel {
    vocab: Vocab,
    generation: u32,
    log_floor: f64,
    kind: ModelKind,
}

impl AutoregressiveModel {
    pub fn uniform(vocab: Vocab, order: usize) -> Result<Self> {
        let v = vocab.size();
        let rows = vec![vec![1.0 / v as f64; v]; TabularModel::context_count(v, order.max(1))];
        Self::tabular_from_probs(vocab, order, &rows, DEFAULT_LOG_FLOOR)
    }

    /// Builds an n-gram model from probability rows, one per context index.
    /// Rows are renormalized; zeros map to the log-floor.
    pub fn tabular_from_probs(vocab: Vocab, order: usize, rows: &[Vec<f64>], log_floor: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::domain("model order must be at least 1"));
        }
        let v = vocab.size();
        let n_ctx = TabularModel::context_count(v, order);
        if rows.len() != n_ctx || rows.iter().any(|r| r.len() != v) {
            return Err(Error::domain(format!("expected {n_ctx} rows of {v} probabilities")));
        }
        let mut log_probs = Vec::with_capacity(n_ctx * v);
        for row in rows {
            let total: f64 = row.iter().sum();
            if !(total > 0.0) || row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::domain("probability rows must be non-negative with positive mass"));
            }
            log_probs.extend(row.iter().map(|p| (p / total).ln().max(log_floor)));
        }
        Ok(Self {
            vocab,
            generation: 0,
            log_floor,
            kind: ModelKind::Tabular(TabularModel { vocab: v, order, log_probs }),
        })
    }

    /// A random n-gram table: logits `scale · N(0,1) + token_bias[v]`.
    pub fn tabular_random(vocab: Vocab, order: usize, scale: f64, token_bias: &[f64], seed: u64) -> Result<Self> {
        let v = vocab.size();
        if token_bias.len() != v {
            return Err(Error::domain("token_bias must have one entry per token"));
        }
        let mut rng = stream_rng(seed, Stream::Init, 0, 0);
        let n_ctx = TabularModel::context_count(v, order.max(1));
        let rows: Vec<Vec<f64>> = (0..n_ctx)
            .map(|_| {
                let mut logits: Vec<f64> = (0..v).map(|i| scale * standard_normal(&mut rng) + token_bias[i]).collect();
                log_softmax_in_place(&mut logits);
                logits.iter().map(|l| l.exp()).collect()
            })
            .collect();
        Self::tabular_from_probs(vocab, order, &rows, DEFAULT_LOG_FLOOR)
    }

    /// Fresh neural model: hidden weights uniform in [-0.1, 0.1], zero head,
    /// so the initial next-token distribution is uniform.
    pub fn neural(vocab: Vocab, window: usize, horizon: usize, hidden: usize, seed: u64) -> Result<Self> {
        if window == 0 || hidden == 0 {
            return Err(Error::domain("neural model needs window >= 1 and hidden >= 1"));
        }
        let features = WindowFeatures {
            vocab: vocab.size(),
            window,
            horizon,
        };
        let mut rng = stream_rng(seed, Stream::Init, 1, 0);
        let mlp = Mlp::new(features.dim(), hidden, vocab.size(), 0.1, &mut rng);
        Ok(Self {
            vocab,
            generation: 0,
            log_floor: DEFAULT_LOG_FLOOR,
            kind: ModelKind::Neural(NeuralModel { features, mlp }),
        })
    }

    /// A neural model computing exactly the same conditionals as a unigram or
    /// bigram table, through the skip path. Hidden weights are still random,
    /// with a zero output head, so training can move off the table.
    pub fn neural_from_tabular(tab: &AutoregressiveModel, horizon: usize, hidden: usize, seed: u64) -> Result<Self> {
        let ModelKind::Tabular(t) = &tab.kind else {
            return Err(Error::domain("neural_from_tabular expects a tabular model"));
        };
        if t.order > 2 {
            return Err(Error::domain("only unigram and bigram tables can be imported exactly"));
        }
        let mut out = Self::neural(tab.vocab.clone(), 1, horizon, hidden, seed)?;
        out.generation = tab.generation;
        out.log_floor = tab.log_floor;
        let v = tab.vocab.size();
        if let ModelKind::Neural(n) = &mut out.kind {
            let skip = n.mlp.skip_mut();
            for tok in 0..=v {
                let ctx = if t.order == 2 { tok } else { 0 };
                for u in 0..v {
                    skip[tok * v + u] = t.row(ctx)[u];
                }
            }
        }
        Ok(out)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }
    pub fn generation(&self) -> u32 {
        self.generation
    }
    pub fn with_generation(mut self, m: u32) -> Self {
        self.generation = m;
        self
    }
    pub fn log_floor(&self) -> f64 {
        self.log_floor
    }
    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }
    pub fn kind_mut(&mut self) -> &mut ModelKind {
        &mut self.kind
    }

    pub fn as_neural(&self) -> Option<&NeuralModel> {
        match &self.kind {
            ModelKind::Neural(n) => Some(n),
            ModelKind::Tabular(_) => None,
        }
    }

    pub fn as_neural_mut(&mut self) -> Option<&mut NeuralModel> {
        match &mut self.kind {
            ModelKind::Neural(n) => Some(n),
            ModelKind::Tabular(_) => None,
        }
    }

    /// Window length for neural models, n-gram order for tables.
    pub fn order(&self) -> usize {
        match &self.kind {
            ModelKind::Tabular(t) => t.order,
            ModelKind::Neural(n) => n.features.window,
        }
    }

    /// `log p(v | prompt ⊕ prefix)` for every token `v`.
    pub fn next_token_logprobs(&self, prompt: &Prompt, prefix: &[TokenId]) -> Result<Vec<f64>> {
        if prefix.len() >= prompt.horizon {
            return Err(Error::domain(format!(
                "prefix length {} must be below the horizon {}",
                prefix.len(),
                prompt.horizon
            )));
        }
        self.vocab.check(&prompt.tokens)?;
        self.vocab.check(prefix)?;
        Ok(self.next_token_logprobs_unchecked(&prompt.tokens, prefix))
    }

    pub(crate) fn next_token_logprobs_unchecked(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
        match &self.kind {
            ModelKind::Tabular(t) => t.row(t.context_index(prompt, prefix)).to_vec(),
            ModelKind::Neural(n) => n.log_probs(prompt, prefix).2,
        }
    }

    /// `Σ_t log p(s_t | s_{0:t-1})`.
    pub fn sequence_logprob(&self, prompt: &Prompt, seq: &[TokenId]) -> Result<f64> {
        if seq.len() != prompt.horizon {
            return Err(Error::domain(format!(
                "sequence has {} tokens, horizon is {}",
                seq.len(),
                prompt.horizon
            )));
        }
        self.vocab.check(&prompt.tokens)?;
        self.vocab.check(seq)?;
        Ok(self.prefix_logprob_unchecked(&prompt.tokens, seq))
    }

    /// Log-probability of a (possibly partial) prefix.
    pub(crate) fn prefix_logprob_unchecked(&self, prompt: &[TokenId], prefix: &[TokenId]) -> f64 {
        (0..prefix.len())
            .map(|t| self.next_token_logprobs_unchecked(prompt, &prefix[..t])[prefix[t]])
            .sum()
    }

    /// Ancestral sampling of a full continuation.
    pub fn sample_sequence<R: Rng + ?Sized>(&self, prompt: &Prompt, rng: &mut R) -> Sequence {
        let mut out = Vec::with_capacity(prompt.horizon);
        for _ in 0..prompt.horizon {
            let lp = self.next_token_logprobs_unchecked(&prompt.tokens, &out);
            let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
            let total: f64 = probs.iter().sum();
            out.push(categorical_from_uniform(&probs, rng.random::<f64>() * total));
        }
        Sequence(out)
    }

    /// Adds `coef · ∇_θ log p(token | prompt ⊕ prefix)` to `grad`.
    /// Neural models only.
    pub fn accumulate_grad_token_logprob(
        &self,
        prompt: &[TokenId],
        prefix: &[TokenId],
        token: TokenId,
        coef: f64,
        grad: &mut [f64],
    ) {
        let ModelKind::Neural(n) = &self.kind else {
            panic!("gradients are only defined for neural models");
        };
        let (active, act, lp) = n.log_probs(prompt, prefix);
        let d_out: Vec<f64> = lp
            .iter()
            .enumerate()
            .map(|(v, l)| coef * (f64::from(u8::from(v == token)) - l.exp()))
            .collect();
        n.mlp.backward(&active, &act, &d_out, grad);
    }

    /// Adds `coef · ∇_θ log p(seq | prompt)` to `grad`. Neural models only.
    pub fn accumulate_grad_sequence_logprob(&self, prompt: &[TokenId], seq: &[TokenId], coef: f64, grad: &mut [f64]) {
        for t in 0..seq.len() {
            self.accumulate_grad_token_logprob(prompt, &seq[..t], seq[t], coef, grad);
        }
    }

    pub fn param_count(&self) -> usize {
        match &self.kind {
            ModelKind::Tabular(t) => t.log_probs.len(),
            ModelKind::Neural(n) => n.mlp.param_count(),
        }
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let mut header = Header::new();
        header.push("vocab", self.vocab.size());
        if let Some(names) = self.vocab.names() {
            header.push("names", names.join(","));
        }
        header.push("order", self.order());
        header.push("generation", self.generation);
        header.push("log_floor", format!("{:?}", self.log_floor));
        let (kind, params) = match &self.kind {
            ModelKind::Tabular(t) => ("tabular", t.log_probs.as_slice()),
            ModelKind::Neural(n) => {
                header.push("horizon", n.features.horizon);
                header.push("hidden", n.mlp.hidden_dim());
                ("neural", n.mlp.params())
            }
        };
        FlatFile::new(kind, header, params.to_vec()).write(w)
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self> {
        let file = FlatFile::read(r)?;
        let h = &file.header;
        let size: usize = h.parse("vocab")?;
        let vocab = match h.get("names") {
            Some(n) => Vocab::with_names(n.split(',').map(str::to_owned).collect())?,
            None => Vocab::new(size)?,
        };
        if vocab.size() != size {
            return Err(Error::Parse("names do not match vocab size".into()));
        }
        let order: usize = h.parse("order")?;
        let generation: u32 = h.parse("generation")?;
        let log_floor: f64 = h.parse("log_floor")?;
        let kind = match file.kind.as_str() {
            "tabular" => {
                if order == 0 || file.params.len() != TabularModel::context_count(size, order) * size {
                    return Err(Error::Parse("tabular parameter count mismatch".into()));
                }
                ModelKind::Tabular(TabularModel {
                    vocab: size,
                    order,
                    log_probs: file.params,
                })
            }
            "neural" => {
                let features = WindowFeatures {
                    vocab: size,
                    window: order,
                    horizon: h.parse("horizon")?,
                };
                let hidden: usize = h.parse("hidden")?;
                let mlp = Mlp::from_params(features.dim(), hidden, size, file.params)
                    .ok_or_else(|| Error::Parse("neural parameter count mismatch".into()))?;
                ModelKind::Neural(NeuralModel { features, mlp })
            }
            other => return Err(Error::Parse(format!("unknown model kind {other:?}"))),
        };
        Ok(Self {
            vocab,
            generation,
            log_floor,
            kind,
        })
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller; one draw per call keeps stream consumption fixed
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// How [`fit_mle`] should parameterize the fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MleConfig {
    Tabular {
        #[serde(default = "default_order")]
        order: usize,
        /// Additive (Laplace) smoothing count.
        #[serde(default = "default_smoothing")]
        smoothing: f64,
    },
    Neural {
        window: usize,
        hidden: usize,
        #[serde(default = "default_mle_steps")]
        steps: usize,
        #[serde(default = "default_mle_lr")]
        learning_rate: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_order() -> usize {
    2
}
fn default_smoothing() -> f64 {
    1.0
}
fn default_mle_steps() -> usize {
    2000
}
fn default_mle_lr() -> f64 {
    1e-2
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig::Tabular {
            order: default_order(),
            smoothing: default_smoothing(),
        }
    }
}

/// Next-token counts grouped by identical neural input features.
#[derive(Debug, Clone)]
pub struct ContextCounts {
    pub contexts: Vec<(Vec<usize>, Vec<f64>)>,
    pub sequences: usize,
}

impl ContextCounts {
    pub fn build(features: &WindowFeatures, prompt: &Prompt, data: &[Sequence]) -> Self {
        let mut map: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
        for seq in data {
            for t in 0..seq.len() {
                let active = features.active(&prompt.tokens, &seq.0[..t]);
                map.entry(active).or_insert_with(|| vec![0.0; features.vocab])[seq.0[t]] += 1.0;
            }
        }
        Self {
            contexts: map.into_iter().collect(),
            sequences: data.len(),
        }
    }
}

/// Average negative log-likelihood per sequence and its parameter gradient.
pub fn neural_mle_loss_and_grad(model: &NeuralModel, counts: &ContextCounts) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; model.mlp.param_count()];
    let mut loss = 0.0;
    let n = counts.sequences as f64;
    for (active, cnt) in &counts.contexts {
        let act = model.mlp.forward(active);
        let mut lp = act.output.clone();
        log_softmax_in_place(&mut lp);
        let total: f64 = cnt.iter().sum();
        loss -= cnt.iter().zip(&lp).map(|(c, l)| c * l).sum::<f64>() / n;
        let d_out: Vec<f64> = lp.iter().zip(cnt).map(|(l, c)| (total * l.exp() - c) / n).collect();
        model.mlp.backward(active, &act, &d_out, &mut grad);
    }
    (loss, grad)
}

/// Maximum-likelihood fit on a dataset of continuations of one prompt.
///
/// Tabular: closed-form smoothed counts. Neural: full-batch Adam for the
/// configured number of steps, returning the best iterate seen (the uniform
/// initialization included), so the fit never scores below the uniform model.
pub fn fit_mle(vocab: &Vocab, prompt: &Prompt, data: &[Sequence], config: &MleConfig) -> Result<AutoregressiveModel> {
    if data.is_empty() {
        return Err(Error::domain("cannot fit a model to an empty dataset"));
    }
    for s in data {
        if s.len() != prompt.horizon {
            return Err(Error::domain("all sequences must match the prompt horizon"));
        }
        vocab.check(&s.0)?;
    }
    vocab.check(&prompt.tokens)?;
    let v = vocab.size();
    match *config {
        MleConfig::Tabular { order, smoothing } => {
            if order == 0 || !(smoothing >= 0.0) {
                return Err(Error::domain("tabular MLE needs order >= 1 and smoothing >= 0"));
            }
            let mut shell = AutoregressiveModel::uniform(vocab.clone(), order)?;
            let ModelKind::Tabular(t) = &mut shell.kind else { unreachable!() };
            let n_ctx = TabularModel::context_count(v, order);
            let mut counts = vec![0.0; n_ctx * v];
            for s in data {
                for i in 0..s.len() {
                    let ctx = t.context_index(&prompt.tokens, &s.0[..i]);
                    counts[ctx * v + s.0[i]] += 1.0;
                }
            }
            let rows: Vec<Vec<f64>> = counts
                .chunks(v)
                .map(|c| {
                    let total: f64 = c.iter().sum::<f64>() + smoothing * v as f64;
                    if total > 0.0 {
                        c.iter().map(|x| (x + smoothing) / total).collect()
                    } else {
                        vec![1.0 / v as f64; v]
                    }
                })
                .collect();
            AutoregressiveModel::tabular_from_probs(vocab.clone(), order, &rows, DEFAULT_LOG_FLOOR)
        }
        MleConfig::Neural {
            window,
            hidden,
            steps,
            learning_rate,
            seed,
        } => {
            let mut model = AutoregressiveModel::neural(vocab.clone(), window, prompt.horizon, hidden, seed)?;
            let ModelKind::Neural(n) = &mut model.kind else { unreachable!() };
            let counts = ContextCounts::build(&n.features, prompt, data);
            let mut opt = Optimizer::new(OptimizerKind::Adam, learning_rate, n.mlp.param_count());
            let (mut best_loss, mut grad) = neural_mle_loss_and_grad(n, &counts);
            let mut best = n.mlp.params().to_vec();
            for _ in 0..steps {
                opt.step(n.mlp.params_mut(), &grad);
                let (loss, g) = neural_mle_loss_and_grad(n, &counts);
                if loss < best_loss {
                    best_loss = loss;
                    best.copy_from_slice(n.mlp.params());
                }
                grad = g;
            }
            n.mlp.params_mut().copy_from_slice(&best);
            Ok(model)
        }
    }
}

/// Mean per-sequence log-likelihood of a dataset.
pub fn average_loglik(model: &AutoregressiveModel, prompt: &Prompt, data: &[Sequence]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::domain("empty dataset"));
    }
    let mut total = 0.0;
    for s in data {
        total += model.sequence_logprob(prompt, &s.0)?;
    }
    Ok(total / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn ab() -> Vocab {
        Vocab::with_names(vec!["a".into(), "b".into()]).unwrap()
    }

    fn always_b() -> AutoregressiveModel {
        let rows = vec![vec![0.0, 1.0]; 3];
        AutoregressiveModel::tabular_from_probs(ab(), 2, &rows, DEFAULT_LOG_FLOOR).unwrap()
    }

    #[test]
    fn vocab_guards() {
        assert!(Vocab::new(1).is_err());
        assert!(Vocab::with_names(vec!["a".into(), "a".into()]).is_err());
        assert_eq!(ab().render(&[0, 1, 1]), "abb");
    }

    #[test]
    fn uniform_model_is_uniform() {
        let m = AutoregressiveModel::uniform(ab(), 2).unwrap();
        let p = Prompt::new(vec![], 2).unwrap();
        let lp = m.next_token_logprobs(&p, &[1]).unwrap();
        assert!(lp.iter().all(|l| (l - 0.5f64.ln()).abs() < 1e-15));
        assert!((m.sequence_logprob(&p, &[0, 1]).unwrap() - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn degenerate_model_uses_log_floor() {
        let m = always_b();
        let p = Prompt::new(vec![], 3).unwrap();
        assert_eq!(m.next_token_logprobs(&p, &[]).unwrap(), vec![DEFAULT_LOG_FLOOR, 0.0]);
        assert_eq!(m.sequence_logprob(&p, &[1, 1, 1]).unwrap(), 0.0);
        let mut rng = stream_rng(0, Stream::ModelSampling, 0, 0);
        assert_eq!(m.sample_sequence(&p, &mut rng).0, vec![1, 1, 1]);
    }

    #[test]
    fn out_of_range_and_incomplete_inputs_are_errors() {
        let m = AutoregressiveModel::uniform(ab(), 2).unwrap();
        let p = Prompt::new(vec![], 2).unwrap();
        assert!(matches!(m.next_token_logprobs(&p, &[2]), Err(Error::InputDomain(_))));
        assert!(matches!(m.next_token_logprobs(&p, &[0, 0]), Err(Error::InputDomain(_))));
        assert!(matches!(m.sequence_logprob(&p, &[0]), Err(Error::InputDomain(_))));
        assert!(fit_mle(&ab(), &p, &[], &MleConfig::default()).is_err());
    }

    #[test]
    fn smoothed_bigram_counts() {
        // context a followed by a three times and by b once
        let p = Prompt::new(vec![0], 1).unwrap();
        let data: Vec<Sequence> = vec![vec![0].into(), vec![0].into(), vec![0].into(), vec![1].into()];
        let m = fit_mle(&ab(), &p, &data, &MleConfig::Tabular { order: 2, smoothing: 1.0 }).unwrap();
        let lp = m.next_token_logprobs(&p, &[]).unwrap();
        assert!((lp[0] - (4.0f64 / 6.0).ln()).abs() < 1e-15);
        assert!((lp[1] - (2.0f64 / 6.0).ln()).abs() < 1e-15);
        // chain rule: "aa" after prompt a
        let p2 = Prompt::new(vec![0], 2).unwrap();
        let m2 = AutoregressiveModel::tabular_from_probs(
            ab(),
            2,
            &[vec![4.0 / 6.0, 2.0 / 6.0], vec![0.5, 0.5], vec![0.5, 0.5]],
            DEFAULT_LOG_FLOOR,
        )
        .unwrap();
        let want = 2.0 * (4.0f64 / 6.0).ln();
        assert!((m2.sequence_logprob(&p2, &[0, 0]).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn single_atom_mle_without_smoothing() {
        let p = Prompt::new(vec![], 2).unwrap();
        let data = vec![Sequence(vec![1, 1]); 100];
        let m = fit_mle(&ab(), &p, &data, &MleConfig::Tabular { order: 2, smoothing: 0.0 }).unwrap();
        assert_eq!(m.next_token_logprobs(&p, &[]).unwrap()[1], 0.0);
        assert_eq!(m.next_token_logprobs(&p, &[1]).unwrap()[1], 0.0);
    }

    #[test]
    fn neural_import_matches_table() {
        let vocab = Vocab::new(4).unwrap();
        let tab = AutoregressiveModel::tabular_random(vocab, 2, 1.0, &[0.0, 0.0, 0.0, -2.0], 5).unwrap();
        let neural = AutoregressiveModel::neural_from_tabular(&tab, 5, 8, 1).unwrap();
        let p = Prompt::new(vec![2], 5).unwrap();
        for prefix in [&[][..], &[0], &[3, 1], &[1, 1, 2, 3]] {
            let a = tab.next_token_logprobs(&p, prefix).unwrap();
            let b = neural.next_token_logprobs(&p, prefix).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let vocab = Vocab::with_names(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let tab = AutoregressiveModel::tabular_random(vocab.clone(), 3, 1.3, &[0.0; 3], 2)
            .unwrap()
            .with_generation(4);
        let mut buf = Vec::new();
        tab.save(&mut buf).unwrap();
        assert_eq!(AutoregressiveModel::load(&buf[..]).unwrap(), tab);

        let neural = AutoregressiveModel::neural(vocab, 2, 4, 5, 3).unwrap().with_generation(1);
        let mut buf = Vec::new();
        neural.save(&mut buf).unwrap();
        assert_eq!(AutoregressiveModel::load(&buf[..]).unwrap(), neural);
    }
}
