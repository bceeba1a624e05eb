//! Experiment configuration (TOML). Unknown keys are rejected everywhere.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineConfig;
use crate::ctl::CtlConfig;
use crate::distill::{DistillConfig, TwistSpec};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::oracle::DEFAULT_ATTEMPT_CAP;
use crate::potential::Potential;
use crate::seqmodel::{AutoregressiveModel, MleConfig, Prompt, TokenId, Vocab, DEFAULT_LOG_FLOOR};
use crate::smc::{ResamplingScheme, SmcConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub vocab: VocabSpec,
    pub prompt: PromptSpec,
    pub base_model: BaseModelSpec,
    pub potential: PotentialSpec,
    #[serde(default)]
    pub twist: TwistSpec,
    #[serde(default)]
    pub smc: SmcSpec,
    #[serde(default)]
    pub ctl: CtlConfig,
    #[serde(default)]
    pub distill: DistillSpec,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub baselines: BaselinesSpec,
    #[serde(default)]
    pub oracle: OracleSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    #[serde(default)]
    pub tokens: Vec<String>,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BaseModelSpec {
    Uniform {
        #[serde(default = "one")]
        order: usize,
    },
    /// Random n-gram table with per-token logit offsets.
    Random {
        #[serde(default = "two")]
        order: usize,
        #[serde(default = "unit")]
        scale: f64,
        #[serde(default)]
        token_bias: BTreeMap<String, f64>,
        #[serde(default)]
        seed: u64,
    },
    /// Explicit conditional probability rows, one per context.
    Table { order: usize, rows: Vec<Vec<f64>> },
    /// A model file written by `train` or `baselines`.
    File { path: PathBuf },
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PotentialSpec {
    /// `sigmoid(bias + Σ weights[token])^beta`; unlisted tokens weigh 0.
    Logistic {
        #[serde(default)]
        weights: BTreeMap<String, f64>,
        #[serde(default)]
        bias: f64,
        #[serde(default = "unit")]
        beta: f64,
        #[serde(default = "floor")]
        log_floor: f64,
    },
    /// Explicit scores in `(0, 1]` for every sequence, in base-V order.
    Table {
        scores: Vec<f64>,
        #[serde(default = "unit")]
        beta: f64,
        #[serde(default = "floor")]
        log_floor: f64,
    },
}

fn floor() -> f64 {
    DEFAULT_LOG_FLOOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmcSpec {
    #[serde(default = "k_train")]
    pub k_train: usize,
    #[serde(default = "k_test")]
    pub k_test: usize,
    #[serde(default)]
    pub scheme: ResamplingScheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ess_threshold: Option<f64>,
    #[serde(default)]
    pub disable_resampling: bool,
}

fn k_train() -> usize {
    100
}
fn k_test() -> usize {
    50
}

impl Default for SmcSpec {
    fn default() -> Self {
        Self {
            k_train: k_train(),
            k_test: k_test(),
            scheme: ResamplingScheme::Multinomial,
            ess_threshold: None,
            disable_resampling: false,
        }
    }
}

impl SmcSpec {
    pub fn smc_config(&self) -> SmcConfig {
        SmcConfig {
            scheme: self.scheme,
            ess_threshold: self.ess_threshold,
            disable_resampling: self.disable_resampling,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSpec {
    #[serde(default)]
    pub generations: u32,
    #[serde(default = "dataset_size")]
    pub dataset_size: usize,
    #[serde(default = "yes")]
    pub warm_start: bool,
    #[serde(default)]
    pub mle: MleConfig,
}

fn dataset_size() -> usize {
    10_000
}
fn yes() -> bool {
    true
}

impl Default for DistillSpec {
    fn default() -> Self {
        Self {
            generations: 0,
            dataset_size: dataset_size(),
            warm_start: true,
            mle: MleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default = "k_grid")]
    pub k_grid: Vec<usize>,
    /// TSMC runs per metrics snapshot.
    #[serde(default = "repeats")]
    pub repeats: usize,
    /// TSMC runs per particle-efficiency cell.
    #[serde(default = "efficiency_repeats")]
    pub efficiency_repeats: usize,
    #[serde(default = "kl_samples")]
    pub kl_samples: usize,
    /// Sequences per method for the similarity/toxicity points.
    #[serde(default = "samples")]
    pub samples: usize,
    #[serde(default = "bins")]
    pub histogram_bins: usize,
}

fn k_grid() -> Vec<usize> {
    vec![4, 16, 64, 256]
}
fn repeats() -> usize {
    20
}
fn efficiency_repeats() -> usize {
    100
}
fn kl_samples() -> usize {
    10_000
}
fn samples() -> usize {
    1000
}
fn bins() -> usize {
    20
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            k_grid: k_grid(),
            repeats: repeats(),
            efficiency_repeats: efficiency_repeats(),
            kl_samples: kl_samples(),
            samples: samples(),
            histogram_bins: bins(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselinesSpec {
    /// Hidden width of the neural policy initialized from the base model.
    #[serde(default = "policy_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub dpo: BaselineConfig,
    #[serde(default = "grpo_default")]
    pub grpo: BaselineConfig,
}

fn policy_hidden() -> usize {
    16
}
fn grpo_default() -> BaselineConfig {
    BaselineConfig {
        beta: 0.04,
        ..BaselineConfig::default()
    }
}

impl Default for BaselinesSpec {
    fn default() -> Self {
        Self {
            hidden: policy_hidden(),
            dpo: BaselineConfig::default(),
            grpo: grpo_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    #[serde(default = "betas")]
    pub betas: Vec<f64>,
    #[serde(default = "accepts")]
    pub accepts: usize,
    #[serde(default = "attempt_cap")]
    pub attempt_cap: u64,
}

fn betas() -> Vec<f64> {
    vec![0.0, 1.0, 10.0]
}
fn accepts() -> usize {
    10_000
}
fn attempt_cap() -> u64 {
    DEFAULT_ATTEMPT_CAP
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            betas: betas(),
            accepts: accepts(),
            attempt_cap: attempt_cap(),
        }
    }
}

/// Everything a subcommand needs, with names resolved to ids.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub vocab: Vocab,
    pub prompt: Prompt,
    pub model0: AutoregressiveModel,
    pub potential: Potential,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn vocab(&self) -> Result<Vocab> {
        let v = match (&self.vocab.size, &self.vocab.names) {
            (_, Some(names)) => {
                if self.vocab.size.is_some_and(|s| s != names.len()) {
                    return Err(Error::Config("vocab.size disagrees with vocab.names".into()));
                }
                Vocab::with_names(names.clone())
            }
            (Some(s), None) => Vocab::new(*s),
            (None, None) => return Err(Error::Config("vocab needs size or names".into())),
        };
        v.map_err(to_config)
    }

    fn token(vocab: &Vocab, name: &str, what: &str) -> Result<TokenId> {
        vocab
            .id_of(name)
            .ok_or_else(|| Error::Config(format!("{what}: unknown token {name:?}")))
    }

    fn per_token(vocab: &Vocab, map: &BTreeMap<String, f64>, what: &str) -> Result<Vec<f64>> {
        let mut out = vec![0.0; vocab.size()];
        for (name, w) in map {
            out[Self::token(vocab, name, what)?] = *w;
        }
        Ok(out)
    }

    /// Validates cross-references and builds the base model and potential.
    pub fn resolve(&self) -> Result<Resolved> {
        let vocab = self.vocab()?;
        let tokens = self
            .prompt
            .tokens
            .iter()
            .map(|t| Self::token(&vocab, t, "prompt.tokens"))
            .collect::<Result<Vec<_>>>()?;
        let prompt = Prompt::new(tokens, self.prompt.horizon).map_err(to_config)?;
        let model0 = match &self.base_model {
            BaseModelSpec::Uniform { order } => AutoregressiveModel::uniform(vocab.clone(), *order),
            BaseModelSpec::Random {
                order,
                scale,
                token_bias,
                seed,
            } => {
                let bias = Self::per_token(&vocab, token_bias, "base_model.token_bias")?;
                AutoregressiveModel::tabular_random(vocab.clone(), *order, *scale, &bias, *seed)
            }
            BaseModelSpec::Table { order, rows } => {
                AutoregressiveModel::tabular_from_probs(vocab.clone(), *order, rows, DEFAULT_LOG_FLOOR)
            }
            BaseModelSpec::File { path } => {
                let f = File::open(path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
                let m = AutoregressiveModel::load(BufReader::new(f))?;
                if m.vocab().size() != vocab.size() {
                    return Err(Error::Config("base_model file vocabulary does not match vocab".into()));
                }
                Ok(m)
            }
        }
        .map_err(to_config)?;
        let potential = match &self.potential {
            PotentialSpec::Logistic {
                weights,
                bias,
                beta,
                log_floor,
            } => {
                let w = Self::per_token(&vocab, weights, "potential.weights")?;
                Potential::logistic(w, *bias, *beta).map(|p| p.with_log_floor(*log_floor))
            }
            PotentialSpec::Table {
                scores,
                beta,
                log_floor,
            } => Potential::table(vocab.size(), prompt.horizon, scores, *beta).map(|p| p.with_log_floor(*log_floor)),
        }
        .map_err(to_config)?;
        potential.check(vocab.size(), prompt.horizon).map_err(to_config)?;
        if self.smc.k_train == 0 || self.smc.k_test == 0 {
            return Err(Error::Config("smc.k_train and smc.k_test must be >= 1".into()));
        }
        if self.eval.k_grid.is_empty() || self.eval.k_grid.contains(&0) {
            return Err(Error::Config("eval.k_grid needs positive entries".into()));
        }
        if self.ctl.steps == 0 || !(self.ctl.learning_rate > 0.0) {
            return Err(Error::Config("ctl needs steps >= 1 and learning_rate > 0".into()));
        }
        if self.oracle.betas.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(Error::Config("oracle.betas must be finite and >= 0".into()));
        }
        Ok(Resolved {
            vocab,
            prompt,
            model0,
            potential,
        })
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            k_test: self.smc.k_test,
            repeats: self.eval.repeats,
            kl_samples: self.eval.kl_samples,
            smc: self.smc.smc_config(),
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            generations: self.distill.generations,
            dataset_size: self.distill.dataset_size,
            k_train: self.smc.k_train,
            warm_start: self.distill.warm_start,
            mle: self.distill.mle.clone(),
            twist: self.twist,
            ctl: self.ctl.clone(),
            smc: self.smc.smc_config(),
            eval: self.eval_config(),
            evaluate: true,
        }
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::InputDomain(s) => Error::Config(s),
        other => other,
    }
}
