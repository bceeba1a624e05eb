//! Self-distilled TSMC: alternate dataset generation with the current
//! sampler, maximum-likelihood refitting of the base model, and contrastive
//! twist learning against the generation's effective potential.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ctl::{train_twist, write_trace_jsonl, CtlConfig, CtlTraceRow};
use crate::error::{Error, Result};
use crate::eval::{snapshot, EvalConfig, EvalContext, MetricsSnapshot};
use crate::potential::{EffectivePotential, Potential, SequencePotential};
use crate::rng::{derive_seed, Stream};
use crate::seqmodel::{fit_mle, AutoregressiveModel, MleConfig, Prompt, Sequence};
use crate::smc::{tsmc_runs, SmcConfig};
use crate::twist::{Twist, TwistNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwistSpec {
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_window() -> usize {
    8
}
fn default_hidden() -> usize {
    32
}

impl Default for TwistSpec {
    fn default() -> Self {
        Self {
            window: default_window(),
            hidden: default_hidden(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Number of self-distillation generations `M`.
    #[serde(default)]
    pub generations: u32,
    #[serde(default = "default_dataset_size")]
    pub dataset_size: usize,
    /// Particles per TSMC run during dataset generation.
    #[serde(default = "default_k_train")]
    pub k_train: usize,
    #[serde(default = "default_true")]
    pub warm_start: bool,
    #[serde(default)]
    pub mle: MleConfig,
    #[serde(default)]
    pub twist: TwistSpec,
    #[serde(default)]
    pub ctl: CtlConfig,
    #[serde(default)]
    pub smc: SmcConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Compute a metrics snapshot for every generation.
    #[serde(default = "default_true")]
    pub evaluate: bool,
}

fn default_dataset_size() -> usize {
    10_000
}
fn default_k_train() -> usize {
    100
}
fn default_true() -> bool {
    true
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            generations: 0,
            dataset_size: default_dataset_size(),
            k_train: default_k_train(),
            warm_start: true,
            mle: MleConfig::default(),
            twist: TwistSpec::default(),
            ctl: CtlConfig::default(),
            smc: SmcConfig::default(),
            eval: EvalConfig::default(),
            evaluate: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub size: usize,
    pub mean_log_potential: f64,
    pub mean_toxicity: f64,
}

impl DatasetSummary {
    pub fn of(pot: &Potential, prompt: &Prompt, data: &[Sequence]) -> Self {
        let n = data.len() as f64;
        Self {
            size: data.len(),
            mean_log_potential: data.iter().map(|s| pot.log_score(prompt, &s.0)).sum::<f64>() / n,
            mean_toxicity: data.iter().map(|s| pot.classifier_prob(&s.0)).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenerationRecord {
    pub index: u32,
    pub model: AutoregressiveModel,
    pub twist: TwistNetwork,
    /// Dataset `p^(m)` was fitted on; empty for generation 0.
    pub dataset: Vec<Sequence>,
    pub dataset_summary: Option<DatasetSummary>,
    pub metrics: Option<MetricsSnapshot>,
    pub ctl_trace: Vec<CtlTraceRow>,
}

/// Final particles of `⌈n/k⌉` independent TSMC runs, concatenated.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    model: &AutoregressiveModel,
    twist: &dyn Twist,
    pot: &dyn SequencePotential,
    prompt: &Prompt,
    k: usize,
    n_sequences: usize,
    smc: &SmcConfig,
    seed: u64,
) -> Result<Vec<Sequence>> {
    if n_sequences == 0 || k == 0 {
        return Err(Error::domain("dataset generation needs n >= 1 and K >= 1"));
    }
    let runs = n_sequences.div_ceil(k);
    let outs = tsmc_runs(model, twist, pot, prompt, k, smc, seed, runs)?;
    Ok(outs.into_iter().flat_map(|o| o.sequences).collect())
}

/// Everything fixed across generations.
pub struct PipelineContext<'a> {
    pub model0: &'a AutoregressiveModel,
    pub pot: &'a Potential,
    pub prompt: &'a Prompt,
    pub config: &'a DistillConfig,
    pub seed: u64,
    pub eval: Option<EvalContext<'a>>,
}

impl PipelineContext<'_> {
    fn ctl_config(&self, m: u32) -> CtlConfig {
        CtlConfig {
            generation: m,
            seed: derive_seed(self.seed, Stream::Ctl, 0),
            ..self.config.ctl.clone()
        }
    }

    fn fresh_twist(&self, m: u32) -> Result<TwistNetwork> {
        let spec = self.config.twist;
        Ok(TwistNetwork::new(
            self.model0.vocab().size(),
            spec.window,
            self.prompt.horizon,
            spec.hidden,
            derive_seed(self.seed, Stream::Init, u64::from(m)),
        )?
        .with_generation(m))
    }

    fn evaluate(&self, model: &AutoregressiveModel, twist: &TwistNetwork, m: u32) -> Result<Option<MetricsSnapshot>> {
        match (&self.eval, self.config.evaluate) {
            (Some(ctx), true) => snapshot(ctx, model, twist, m, &self.config.eval, self.seed).map(Some),
            _ => Ok(None),
        }
    }
}

/// Generation 0: plain CTL on the base model.
pub fn initial_generation(ctx: &PipelineContext<'_>) -> Result<GenerationRecord> {
    let mut twist = ctx.fresh_twist(0)?;
    let eff = EffectivePotential::identity(ctx.pot, ctx.model0);
    let trace = train_twist(ctx.model0, &eff, ctx.prompt, &mut twist, &ctx.ctl_config(0))?;
    let model = ctx.model0.clone().with_generation(0);
    let metrics = ctx.evaluate(&model, &twist, 0)?;
    Ok(GenerationRecord {
        index: 0,
        model,
        twist,
        dataset: Vec::new(),
        dataset_summary: None,
        metrics,
        ctl_trace: trace,
    })
}

/// One outer iteration: sample with generation `m - 1`, refit, retrain the twist.
pub fn self_distill_step(ctx: &PipelineContext<'_>, prev: &GenerationRecord) -> Result<GenerationRecord> {
    let m = prev.index + 1;
    let cfg = ctx.config;
    let prev_eff = EffectivePotential::new(ctx.pot, ctx.model0, &prev.model);
    let dataset = generate_dataset(
        &prev.model,
        &prev.twist,
        &prev_eff,
        ctx.prompt,
        cfg.k_train,
        cfg.dataset_size,
        &cfg.smc,
        derive_seed(ctx.seed, Stream::Dataset, u64::from(m)),
    )?;
    let mle = match cfg.mle.clone() {
        MleConfig::Neural {
            window,
            hidden,
            steps,
            learning_rate,
            seed,
        } => MleConfig::Neural {
            window,
            hidden,
            steps,
            learning_rate,
            seed: derive_seed(seed ^ ctx.seed, Stream::Mle, u64::from(m)),
        },
        other => other,
    };
    let model = fit_mle(ctx.model0.vocab(), ctx.prompt, &dataset, &mle)?.with_generation(m);
    let mut twist = if cfg.warm_start {
        prev.twist.clone().with_generation(m)
    } else {
        ctx.fresh_twist(m)?
    };
    let eff = EffectivePotential::new(ctx.pot, ctx.model0, &model);
    let trace = train_twist(&model, &eff, ctx.prompt, &mut twist, &ctx.ctl_config(m))?;
    let metrics = ctx.evaluate(&model, &twist, m)?;
    Ok(GenerationRecord {
        index: m,
        dataset_summary: Some(DatasetSummary::of(ctx.pot, ctx.prompt, &dataset)),
        model,
        twist,
        dataset,
        metrics,
        ctl_trace: trace,
    })
}

/// Generations `0..=M`; each finished record is handed to `on_record`
/// before the next one starts.
pub fn run_pipeline_with<F: FnMut(&GenerationRecord) -> Result<()>>(
    ctx: &PipelineContext<'_>,
    start: Option<GenerationRecord>,
    mut on_record: F,
) -> Result<Vec<GenerationRecord>> {
    let mut records = Vec::new();
    let first = match start {
        Some(r) => r,
        None => {
            let r = initial_generation(ctx)?;
            on_record(&r)?;
            r
        }
    };
    records.push(first);
    while records.last().unwrap().index < ctx.config.generations {
        let next = self_distill_step(ctx, records.last().unwrap())
            .map_err(|e| annotate(e, records.last().unwrap().index + 1))?;
        on_record(&next)?;
        records.push(next);
    }
    Ok(records)
}

pub fn run_pipeline(ctx: &PipelineContext<'_>) -> Result<Vec<GenerationRecord>> {
    run_pipeline_with(ctx, None, |_| Ok(()))
}

fn annotate(e: Error, m: u32) -> Error {
    match e {
        Error::Config(s) => Error::Config(format!("generation {m}: {s}")),
        Error::InputDomain(s) => Error::InputDomain(format!("generation {m}: {s}")),
        other => other,
    }
}

pub fn generation_dir(root: &Path, m: u32) -> PathBuf {
    root.join(format!("gen_{m}"))
}

/// Writes `gen_<m>/{model.txt, twist.txt, dataset.jsonl, metrics.json, ctl_trace.jsonl}`.
pub fn write_generation(root: &Path, rec: &GenerationRecord) -> Result<()> {
    let dir = generation_dir(root, rec.index);
    fs::create_dir_all(&dir)?;
    rec.model.save(BufWriter::new(File::create(dir.join("model.txt"))?))?;
    rec.twist.save(BufWriter::new(File::create(dir.join("twist.txt"))?))?;
    let mut w = BufWriter::new(File::create(dir.join("dataset.jsonl"))?);
    for s in &rec.dataset {
        serde_json::to_writer(&mut w, s).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(w)?;
    }
    w.flush()?;
    let metrics = serde_json::json!({
        "generation": rec.index,
        "dataset": rec.dataset_summary,
        "metrics": rec.metrics,
    });
    let mut f = File::create(dir.join("metrics.json"))?;
    serde_json::to_writer_pretty(&mut f, &metrics).map_err(|e| Error::Parse(e.to_string()))?;
    writeln!(f)?;
    write_trace_jsonl(&rec.ctl_trace, BufWriter::new(File::create(dir.join("ctl_trace.jsonl"))?))
}

/// Loads model and twist of generation `m` for resuming.
pub fn read_generation(root: &Path, m: u32) -> Result<GenerationRecord> {
    let dir = generation_dir(root, m);
    let open = |name: &str| -> Result<BufReader<File>> {
        let p = dir.join(name);
        File::open(&p)
            .map(BufReader::new)
            .map_err(|_| Error::MissingArtifact(p.display().to_string()))
    };
    let model = AutoregressiveModel::load(open("model.txt")?)?;
    let twist = TwistNetwork::load(open("twist.txt")?)?;
    if model.generation() != m || twist.generation() != m {
        return Err(Error::Parse(format!("artifacts in {} are not tagged generation {m}", dir.display())));
    }
    let mut dataset = Vec::new();
    if let Ok(r) = open("dataset.jsonl") {
        for line in r.lines() {
            let line = line?;
            if !line.is_empty() {
                dataset.push(serde_json::from_str(&line).map_err(|e| Error::Parse(e.to_string()))?);
            }
        }
    }
    Ok(GenerationRecord {
        index: m,
        model,
        twist,
        dataset,
        dataset_summary: None,
        metrics: None,
        ctl_trace: Vec::new(),
    })
}
