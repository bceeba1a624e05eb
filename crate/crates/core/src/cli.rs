//! The `tsmc` experiment runner.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::baselines::{sample_batch, train_baseline, BaselineKind};
use crate::config::{ExperimentConfig, Resolved};
use crate::ctl::write_trace_jsonl;
use crate::distill::{
    generation_dir, read_generation, run_pipeline_with, write_generation, GenerationRecord, PipelineContext,
};
use crate::error::{Error, Result};
use crate::eval::{
    particle_efficiency_curve, snapshot, write_kl_per_generation_csv, write_particle_efficiency_csv,
    write_similarity_toxicity_csv, write_toxicity_hist_csv, EvalContext, MethodPoint,
};
use crate::math::format_sig;
use crate::oracle::{check_capacity, enumerate_target, exact_sequence_kl, rejection_sample, ExactDistribution};
use crate::potential::EffectivePotential;
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::seqmodel::{AutoregressiveModel, ModelKind, Sequence};
use crate::smc::tsmc_runs;
use crate::twist::{Twist, UnitTwist};

#[derive(Debug, Parser)]
#[command(name = "tsmc", version, about = "Twisted SMC with contrastive twist learning and self-distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to `out` from the config, then `runs`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (results do not depend on it).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exact target enumeration and rejection sampling over the configured temperatures.
    Oracle {
        #[command(flatten)]
        common: Common,
    },
    /// Self-distilled TSMC for the configured number of generations.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding `gen_<m>` artifacts to resume from.
        #[arg(long, requires = "generation")]
        resume_from: Option<PathBuf>,
        /// Generation to resume from.
        #[arg(long)]
        generation: Option<u32>,
    },
    /// DPO and GRPO fine-tuning baselines.
    Baselines {
        #[command(flatten)]
        common: Common,
        /// Trained `gen_<m>` artifacts to include in the comparison.
        #[arg(long)]
        artifacts: Option<PathBuf>,
    },
    /// Particle-efficiency and KL evaluation of trained artifacts.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory holding `gen_<m>` artifacts; defaults to the output directory.
        #[arg(long)]
        artifacts: Option<PathBuf>,
    },
    /// Ad-hoc TSMC draws to standard output.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        artifacts: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        generation: u32,
        /// Particles per run; defaults to `smc.k_test`.
        #[arg(long)]
        particles: Option<usize>,
        #[arg(long, default_value_t = 1)]
        runs: usize,
    },
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Oracle { common }
            | Command::Train { common, .. }
            | Command::Baselines { common, .. }
            | Command::Eval { common, .. }
            | Command::Sample { common, .. } => common,
        }
    }
}

/// 2 for configuration problems, 3 for capacity and degeneracy, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse(_) => 2,
        Error::Capacity { .. } | Error::Degeneracy { .. } | Error::Starvation { .. } | Error::DegenerateBatch => 3,
        _ => 1,
    }
}

struct Setup {
    cfg: ExperimentConfig,
    res: Resolved,
    out: PathBuf,
    seed: u64,
}

fn setup(common: &Common) -> Result<Setup> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let res = cfg.resolve()?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&out)?;
    Ok(Setup {
        seed: cfg.seed,
        cfg,
        res,
        out,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Parse(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn exact_if_enumerable(s: &Setup) -> Result<Option<ExactDistribution>> {
    if check_capacity(s.res.vocab.size(), s.res.prompt.horizon).is_err() {
        return Ok(None);
    }
    enumerate_target(&s.res.model0, &s.res.potential, &s.res.prompt).map(Some)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Oracle { common } => cmd_oracle(&setup(common)?),
        Command::Train {
            common,
            resume_from,
            generation,
        } => cmd_train(&setup(common)?, resume_from.as_deref(), *generation),
        Command::Baselines { common, artifacts } => cmd_baselines(&setup(common)?, artifacts.as_deref()),
        Command::Eval { common, artifacts } => {
            let s = setup(common)?;
            let dir = artifacts.clone().unwrap_or_else(|| s.out.clone());
            cmd_eval(&s, &dir)
        }
        Command::Sample {
            common,
            artifacts,
            generation,
            particles,
            runs,
        } => cmd_sample(&setup(common)?, artifacts.as_deref(), *generation, *particles, *runs),
    }
}

fn beta_label(b: f64) -> String {
    format!("beta={b}")
}

fn cmd_oracle(s: &Setup) -> Result<()> {
    let Resolved {
        vocab,
        prompt,
        model0,
        potential,
    } = &s.res;
    let v = vocab.size();
    let n_seq = check_capacity(v, prompt.horizon)?;
    let tox_of = |seqs: &[Sequence]| -> Vec<f64> { seqs.iter().map(|x| potential.classifier_prob(&x.0)).collect() };

    let base_samples = sample_batch(model0, prompt, s.cfg.eval.samples.max(2), derive_seed(s.seed, Stream::ModelSampling, 0));
    let mut hist = vec![("base".to_string(), tox_of(&base_samples))];
    let mut points = vec![MethodPoint::from_samples("Base", potential, &base_samples, v)?];

    let mut acc = create(&s.out.join("acceptance.csv"))?;
    writeln!(
        acc,
        "beta,z_exact,acceptance_ratio,acceptance_se,accepts,attempts,starved,target_toxicity,sample_toxicity,sample_similarity"
    )?;
    for (i, &beta) in s.cfg.oracle.betas.iter().enumerate() {
        let pot = potential.with_beta(beta)?;
        let exact = enumerate_target(model0, &pot, prompt)?;
        if n_seq <= 4096 {
            exact.write_csv(vocab, create(&s.out.join(format!("target_beta_{beta}.csv")))?)?;
        }
        let target_tox = exact.expectation(|x| potential.classifier_prob(x));
        let seed = derive_seed(s.seed, Stream::Rejection, i as u64);
        let (samples, accepts, attempts, starved) =
            match rejection_sample(model0, &pot, prompt, s.cfg.oracle.accepts, seed, s.cfg.oracle.attempt_cap) {
                Ok(r) => {
                    let n = r.samples.len();
                    (r.samples, n, r.attempts, false)
                }
                Err(Error::Starvation { accepted, attempts, .. }) => (Vec::new(), accepted, attempts, true),
                Err(e) => return Err(e),
            };
        let ratio = accepts as f64 / attempts.max(1) as f64;
        let se = (ratio * (1.0 - ratio) / attempts.max(1) as f64).sqrt();
        let (sample_tox, sample_sim) = if samples.len() >= 2 {
            let p = MethodPoint::from_samples(format!("Rejection {}", beta_label(beta)), potential, &samples, v)?;
            let r = (format_sig(p.toxicity), format_sig(p.similarity));
            hist.push((beta_label(beta), tox_of(&samples)));
            points.push(p);
            r
        } else {
            (String::new(), String::new())
        };
        writeln!(
            acc,
            "{beta},{},{},{},{accepts},{attempts},{starved},{},{sample_tox},{sample_sim}",
            format_sig(exact.z()),
            format_sig(ratio),
            format_sig(se),
            format_sig(target_tox)
        )?;
    }
    acc.flush()?;
    write_toxicity_hist_csv(&hist, s.cfg.eval.histogram_bins, create(&s.out.join("toxicity_hist.csv"))?)?;
    write_similarity_toxicity_csv(&points, create(&s.out.join("similarity_toxicity.csv"))?)?;
    Ok(())
}

fn cmd_train(s: &Setup, resume_from: Option<&Path>, generation: Option<u32>) -> Result<()> {
    let exact = exact_if_enumerable(s)?;
    let dcfg = s.cfg.distill_config();
    let ctx = PipelineContext {
        model0: &s.res.model0,
        pot: &s.res.potential,
        prompt: &s.res.prompt,
        config: &dcfg,
        seed: s.seed,
        eval: Some(EvalContext {
            model0: &s.res.model0,
            pot: &s.res.potential,
            prompt: &s.res.prompt,
            exact: exact.as_ref(),
        }),
    };
    let start = match (resume_from, generation) {
        (Some(dir), Some(m)) => {
            if m > dcfg.generations {
                return Err(Error::Config(format!(
                    "cannot resume from generation {m} with distill.generations = {}",
                    dcfg.generations
                )));
            }
            Some(read_generation(dir, m)?)
        }
        _ => None,
    };
    let records = run_pipeline_with(&ctx, start, |r| write_generation(&s.out, r))?;
    let gens: Vec<_> = records
        .iter()
        .map(|r| json!({"generation": r.index, "dataset": r.dataset_summary, "metrics": r.metrics}))
        .collect();
    write_json(&s.out.join("pipeline.json"), &json!({"config": s.cfg, "generations": gens}))?;
    let snaps: Vec<_> = records.iter().filter_map(|r| r.metrics.clone()).collect();
    write_kl_per_generation_csv(&snaps, create(&s.out.join("kl_per_generation.csv"))?)?;
    Ok(())
}

/// `gen_0, gen_1, ...` up to the first missing directory.
fn load_generations(dir: &Path) -> Result<Vec<GenerationRecord>> {
    let mut out = Vec::new();
    while generation_dir(dir, out.len() as u32).is_dir() {
        out.push(read_generation(dir, out.len() as u32)?);
    }
    if out.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "{} (run `tsmc train` first or pass --artifacts)",
            generation_dir(dir, 0).display()
        )));
    }
    Ok(out)
}

fn cmd_eval(s: &Setup, artifacts: &Path) -> Result<()> {
    let records = load_generations(artifacts)?;
    let exact = exact_if_enumerable(s)?;
    let ctx = EvalContext {
        model0: &s.res.model0,
        pot: &s.res.potential,
        prompt: &s.res.prompt,
        exact: exact.as_ref(),
    };
    let ecfg = s.cfg.eval_config();
    let snaps = records
        .iter()
        .map(|r| snapshot(&ctx, &r.model, &r.twist, r.index, &ecfg, s.seed))
        .collect::<Result<Vec<_>>>()?;
    let rows = particle_efficiency_curve(
        &ctx,
        &records,
        &s.cfg.eval.k_grid,
        s.cfg.eval.efficiency_repeats,
        &ecfg.smc,
        derive_seed(s.seed, Stream::Eval, 7),
    )?;
    write_particle_efficiency_csv(&rows, create(&s.out.join("particle_efficiency.csv"))?)?;
    write_kl_per_generation_csv(&snaps, create(&s.out.join("kl_per_generation.csv"))?)?;
    write_json(&s.out.join("eval.json"), &json!({"snapshots": snaps, "particle_efficiency": rows}))
}

fn policy_from_base(s: &Setup) -> Result<AutoregressiveModel> {
    let m = &s.res.model0;
    match m.kind() {
        ModelKind::Neural(_) => Ok(m.clone()),
        ModelKind::Tabular(_) => AutoregressiveModel::neural_from_tabular(
            m,
            s.res.prompt.horizon,
            s.cfg.baselines.hidden,
            derive_seed(s.seed, Stream::Init, 1 << 20),
        )
        .map_err(|e| Error::Config(format!("baselines need a base model of order <= 2: {e}"))),
    }
}

/// `n` TSMC outputs pooled from `⌈n / K⌉` runs.
fn tsmc_pool(s: &Setup, rec: &GenerationRecord, n: usize, seed: u64) -> Result<Vec<Sequence>> {
    let k = s.cfg.smc.k_test;
    let eff = EffectivePotential::new(&s.res.potential, &s.res.model0, &rec.model);
    let runs = tsmc_runs(&rec.model, &rec.twist, &eff, &s.res.prompt, k, &s.cfg.smc.smc_config(), seed, n.div_ceil(k))?;
    Ok(runs.into_iter().flat_map(|r| r.sequences).take(n).collect())
}

fn cmd_baselines(s: &Setup, artifacts: Option<&Path>) -> Result<()> {
    let Resolved {
        vocab,
        prompt,
        model0,
        potential,
    } = &s.res;
    let v = vocab.size();
    let n = s.cfg.eval.samples.max(2);
    let exact = exact_if_enumerable(s)?;
    let policy = policy_from_base(s)?;

    let mut points = Vec::new();
    let mut hist = Vec::new();
    let mut add = |label: String, seqs: &[Sequence]| -> Result<()> {
        points.push(MethodPoint::from_samples(label.clone(), potential, seqs, v)?);
        hist.push((label, seqs.iter().map(|x| potential.classifier_prob(&x.0)).collect()));
        Ok(())
    };
    add("Base".into(), &sample_batch(model0, prompt, n, derive_seed(s.seed, Stream::ModelSampling, 0)))?;
    if let Some(e) = &exact {
        add("Target(exact)".into(), &e.sample(n, &mut stream_rng(s.seed, Stream::Eval, 0, 0)))?;
    }
    let dir = artifacts.map(Path::to_path_buf).unwrap_or_else(|| s.out.clone());
    if generation_dir(&dir, 0).is_dir() {
        for rec in load_generations(&dir)? {
            let seqs = tsmc_pool(s, &rec, n, derive_seed(s.seed, Stream::Eval, 100 + u64::from(rec.index)))?;
            add(format!("TSMC gen {}", rec.index), &seqs)?;
        }
    }
    let mut summary = Vec::new();
    for (i, (kind, bcfg)) in [(BaselineKind::Dpo, &s.cfg.baselines.dpo), (BaselineKind::Grpo, &s.cfg.baselines.grpo)]
        .into_iter()
        .enumerate()
    {
        let mut cfg = bcfg.clone();
        cfg.seed = derive_seed(s.seed ^ bcfg.seed, Stream::Baselines, i as u64);
        let (tuned, trace) = train_baseline(kind, policy.clone(), potential, prompt, &cfg)?;
        let bdir = s.out.join(kind.tag());
        fs::create_dir_all(&bdir)?;
        tuned.save(create(&bdir.join("model.txt"))?)?;
        write_trace_jsonl(&trace, create(&bdir.join("trace.jsonl"))?)?;
        let seqs = sample_batch(&tuned, prompt, n, derive_seed(s.seed, Stream::Eval, 200 + i as u64));
        let label = match kind {
            BaselineKind::Dpo => "DPO",
            BaselineKind::Grpo => "GRPO",
        };
        add(label.into(), &seqs)?;
        let kl = if exact.is_some() {
            Some(exact_sequence_kl(&tuned, &policy, prompt)?)
        } else {
            None
        };
        summary.push(json!({"method": label, "beta": cfg.beta, "exact_kl_to_reference": kl, "final": trace.last()}));
    }
    write_similarity_toxicity_csv(&points, create(&s.out.join("similarity_toxicity.csv"))?)?;
    write_toxicity_hist_csv(&hist, s.cfg.eval.histogram_bins, create(&s.out.join("toxicity_hist.csv"))?)?;
    write_json(&s.out.join("baselines.json"), &json!({"baselines": summary}))
}

fn cmd_sample(
    s: &Setup,
    artifacts: Option<&Path>,
    generation: u32,
    particles: Option<usize>,
    runs: usize,
) -> Result<()> {
    let k = particles.unwrap_or(s.cfg.smc.k_test);
    let loaded;
    let (model, twist): (&AutoregressiveModel, Box<dyn Twist>) = match artifacts {
        Some(dir) => {
            loaded = read_generation(dir, generation)?;
            (&loaded.model, Box::new(loaded.twist.clone()) as Box<dyn Twist>)
        }
        None if generation == 0 => (&s.res.model0, Box::new(UnitTwist { vocab: s.res.vocab.size() })),
        None => return Err(Error::Config("--generation > 0 needs --artifacts".into())),
    };
    let eff = EffectivePotential::new(&s.res.potential, &s.res.model0, model);
    let outs = tsmc_runs(
        model,
        twist.as_ref(),
        &eff,
        &s.res.prompt,
        k,
        &s.cfg.smc.smc_config(),
        derive_seed(s.seed, Stream::ModelSampling, 1),
        runs,
    )?;
    let stdout = io::stdout();
    let mut w = BufWriter::new(stdout.lock());
    writeln!(w, "run\tparticle\tsequence\ttoxicity\tlog_z")?;
    for (r, out) in outs.iter().enumerate() {
        for (i, seq) in out.sequences.iter().enumerate() {
            writeln!(
                w,
                "{r}\t{i}\t{}\t{}\t{}",
                s.res.vocab.render(&seq.0),
                format_sig(s.res.potential.classifier_prob(&seq.0)),
                format_sig(out.log_z)
            )?;
        }
    }
    w.flush()?;
    Ok(())
}
